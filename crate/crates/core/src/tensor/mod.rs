//! A small dense tensor with reverse-mode automatic differentiation.
//!
//! Design points:
//! - Row-major contiguous `f64` storage. Double precision is deliberate:
//!   the gradient checks, codec round trips and sampler inversions in the
//!   test suite pin tolerances (1e-9 .. 1e-12) that single precision cannot
//!   meet, and at desk scale memory is not the bottleneck.
//! - A computation graph lives on one thread (`Tensor` is `Rc`-based and
//!   intentionally not `Send`). Parallel callers each build their own graph,
//!   sharing raw parameter snapshots instead of live tensors.
//! - Tensors are immutable after construction. The two sanctioned mutations
//!   are gradient accumulation during `backward` and optimizer updates
//!   through [`Tensor::apply_update`].
//! - Every op validates its output for NaN/Inf and fails loudly rather than
//!   propagating poison.

mod conv;
mod gradcheck;
mod norm;
mod ops;
mod rearrange;
mod resample;

pub use gradcheck::{grad_check, require_grad_check, GradCheckConfig, GradReport};
pub use resample::resample_plane_bicubic;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{CoreError, Result};

thread_local! {
    static NEXT_TENSOR_ID: Cell<u64> = const { Cell::new(1) };
}

fn next_id() -> u64 {
    NEXT_TENSOR_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn = Box<dyn Fn(&Tensor)>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Cheap-to-clone handle onto a node of the computation graph.
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::NonFinite { op })
    }
}

impl Tensor {
    fn new_node(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::invalid(
                op,
                format!("shape {:?} does not hold {} values", shape, data.len()),
            ));
        }
        check_finite(op, &data)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        })
    }

    /// Builds an op result. The graph edge is only kept when some parent
    /// needs gradients, so inference code drops its history as it goes.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        make_backward: impl FnOnce() -> BackwardFn,
    ) -> Result<Tensor> {
        let needs = parents.iter().any(|p| p.inner.requires_grad);
        if needs {
            Self::new_node(op, shape, data, true, parents, Some(make_backward()))
        } else {
            Self::new_node(op, shape, data, false, Vec::new(), None)
        }
    }

    /// A constant tensor that does not participate in gradients.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::new_node("from_vec", shape.to_vec(), data, false, Vec::new(), None)
    }

    /// A leaf tensor that accumulates gradients (a trainable parameter or a
    /// differentiable input).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::new_node("param", shape.to_vec(), data, true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Self::new_node("zeros", shape.to_vec(), vec![0.0; numel], false, Vec::new(), None)
            .expect("zeros is always valid")
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        let numel = shape.iter().product();
        Self::new_node("full", shape.to_vec(), vec![value; numel], false, Vec::new(), None)
    }

    pub fn scalar(value: f64) -> Result<Tensor> {
        Self::from_vec(vec![value], &[1])
    }

    /// Standard-normal samples, deterministic under the caller's generator.
    pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| StandardNormal.sample(rng)).collect();
        Self::new_node("randn", shape.to_vec(), data, false, Vec::new(), None)
            .expect("normal samples are finite")
    }

    /// Uniform samples on [lo, hi).
    pub fn rand_uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        let dist = Uniform::new(lo, hi)
            .map_err(|e| CoreError::invalid("rand_uniform", e.to_string()))?;
        let data: Vec<f64> = (0..numel).map(|_| dist.sample(rng)).collect();
        Self::from_vec(data, shape)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copies the values out. Ops read through [`Tensor::with_data`] instead
    /// to avoid the copy; this is for callers that need ownership.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Runs `f` over the raw storage without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(CoreError::invalid(
                "item",
                format!("expected one element, got shape {:?}", self.shape()),
            ));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place update used by optimizers. Checks the result stays finite.
    pub fn apply_update(&self, f: impl FnMut(&mut f64)) -> Result<()> {
        {
            let mut data = self.inner.data.borrow_mut();
            data.iter_mut().for_each(f);
        }
        check_finite("apply_update", &self.inner.data.borrow())
    }

    /// Replaces the stored values (used by checkpoint loading).
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(CoreError::invalid(
                "set_data",
                format!("expected {} values, got {}", self.numel(), values.len()),
            ));
        }
        check_finite("set_data", values)?;
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// A leaf copy of this tensor's values, detached from the graph.
    pub fn detach(&self) -> Tensor {
        Self::new_node(
            "detach",
            self.inner.shape.clone(),
            self.to_vec(),
            false,
            Vec::new(),
            None,
        )
        .expect("detach preserves validity")
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn grad_ref<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        let g = self.inner.grad.borrow();
        f(g.as_deref().unwrap_or(&[]))
    }

    /// Reverse-mode differentiation from a single-element tensor. Gradients
    /// accumulate into every reachable leaf with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(CoreError::invalid(
                "backward",
                format!("loss must be a single element, got {:?}", self.shape()),
            ));
        }
        if !self.inner.requires_grad {
            return Err(CoreError::invalid(
                "backward",
                "loss does not depend on any differentiable input",
            ));
        }

        // Iterative post-order DFS: children appear after all their parents
        // have been visited, so the reversed order is a valid schedule.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.inner.parents.len() {
                let parent = node.inner.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if parent.inner.requires_grad && visited.insert(parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            if let Some(back) = &node.inner.backward {
                back(node);
            }
        }
        Ok(())
    }
}
