//! Elementwise, linear-algebra and shape ops with hand-derived adjoints.
//!
//! Broadcasting is deliberately absent. The handful of mixed-shape patterns
//! the models need (per-channel bias, per-sample scaling, row bias) exist as
//! named ops with explicit adjoints, which keeps both the forward kernels
//! and the gradient code auditable.

use crate::error::{CoreError, Result};

use super::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

// ── Raw matrix kernels ──────────────────────────────────────────────────

/// out += a(m,k) · b(k,n), row-major. ikj order so the inner loop runs over
/// contiguous slices of both `b` and `out`.
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out += a(m,k) · b(n,k)ᵀ. Inner loop is a dot product of contiguous rows.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out += a(m,k)ᵀ · b(m,n), producing (k,n).
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

// ── Elementwise ─────────────────────────────────────────────────────────

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("add", self, rhs)?;
        let data = self.with_data(|a| rhs.with_data(|b| a.iter().zip(b).map(|(x, y)| x + y).collect()));
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            move || {
                Box::new(move |out: &Tensor| {
                    out.grad_ref(|g| {
                        pa.accumulate_grad(g);
                        pb.accumulate_grad(g);
                    });
                })
            },
        )
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, rhs)?;
        let data = self.with_data(|a| rhs.with_data(|b| a.iter().zip(b).map(|(x, y)| x - y).collect()));
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            move || {
                Box::new(move |out: &Tensor| {
                    out.grad_ref(|g| {
                        pa.accumulate_grad(g);
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        pb.accumulate_grad(&neg);
                    });
                })
            },
        )
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, rhs)?;
        let data = self.with_data(|a| rhs.with_data(|b| a.iter().zip(b).map(|(x, y)| x * y).collect()));
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            move || {
                Box::new(move |out: &Tensor| {
                    out.grad_ref(|g| {
                        let da: Vec<f64> = pb.with_data(|b| g.iter().zip(b).map(|(gv, bv)| gv * bv).collect());
                        let db: Vec<f64> = pa.with_data(|a| g.iter().zip(a).map(|(gv, av)| gv * av).collect());
                        pa.accumulate_grad(&da);
                        pb.accumulate_grad(&db);
                    });
                })
            },
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.with_data(|a| a.iter().map(|x| x + c).collect());
        let pa = self.clone();
        Tensor::from_op("add_scalar", self.shape().to_vec(), data, vec![self.clone()], move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| pa.accumulate_grad(g));
            })
        })
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.with_data(|a| a.iter().map(|x| x * c).collect());
        let pa = self.clone();
        Tensor::from_op("mul_scalar", self.shape().to_vec(), data, vec![self.clone()], move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    pa.accumulate_grad(&da);
                });
            })
        })
    }

    /// x · sigmoid(x), the activation used throughout the models.
    pub fn silu(&self) -> Result<Tensor> {
        let data = self.with_data(|a| {
            a.iter()
                .map(|&x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    x * s
                })
                .collect()
        });
        let pa = self.clone();
        Tensor::from_op("silu", self.shape().to_vec(), data, vec![self.clone()], move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    let da: Vec<f64> = pa.with_data(|a| {
                        a.iter()
                            .zip(g)
                            .map(|(&x, gv)| {
                                let s = 1.0 / (1.0 + (-x).exp());
                                gv * (s + x * s * (1.0 - s))
                            })
                            .collect()
                    });
                    pa.accumulate_grad(&da);
                });
            })
        })
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&self) -> Result<Tensor> {
        let total = self.with_data(|a| a.iter().sum::<f64>());
        let pa = self.clone();
        let n = self.numel();
        Tensor::from_op("sum_all", vec![1], vec![total], vec![self.clone()], move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    let da = vec![g[0]; n];
                    pa.accumulate_grad(&da);
                });
            })
        })
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(CoreError::invalid("mean_all", "empty tensor"));
        }
        let total = self.with_data(|a| a.iter().sum::<f64>()) / n as f64;
        let pa = self.clone();
        Tensor::from_op("mean_all", vec![1], vec![total], vec![self.clone()], move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    let da = vec![g[0] / n as f64; n];
                    pa.accumulate_grad(&da);
                });
            })
        })
    }

    /// Σ xᵢ·wᵢ against fixed weights; the reduction used by gradient checks
    /// to turn a tensor-valued op into a scalar objective.
    pub fn weighted_sum(&self, weights: &[f64]) -> Result<Tensor> {
        if weights.len() != self.numel() {
            return Err(CoreError::invalid(
                "weighted_sum",
                format!("{} weights for {} elements", weights.len(), self.numel()),
            ));
        }
        let total = self.with_data(|a| a.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>());
        let pa = self.clone();
        let w = weights.to_vec();
        Tensor::from_op("weighted_sum", vec![1], vec![total], vec![self.clone()], move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    let da: Vec<f64> = w.iter().map(|wv| wv * g[0]).collect();
                    pa.accumulate_grad(&da);
                });
            })
        })
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        same_shape("mse", self, target)?;
        let n = self.numel();
        if n == 0 {
            return Err(CoreError::invalid("mse", "empty tensor"));
        }
        let total = self.with_data(|a| {
            target.with_data(|b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        }) / n as f64;
        let (pa, pb) = (self.clone(), target.clone());
        Tensor::from_op("mse", vec![1], vec![total], vec![self.clone(), target.clone()], move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    let scale = 2.0 * g[0] / n as f64;
                    let diff: Vec<f64> =
                        pa.with_data(|a| pb.with_data(|b| a.iter().zip(b).map(|(x, y)| x - y).collect()));
                    let da: Vec<f64> = diff.iter().map(|d| scale * d).collect();
                    let db: Vec<f64> = diff.iter().map(|d| -scale * d).collect();
                    pa.accumulate_grad(&da);
                    pb.accumulate_grad(&db);
                });
            })
        })
    }

    // ── Structured additions ────────────────────────────────────────────

    /// (N,C,H,W) + bias(C), broadcast over batch and space.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape().to_vec();
        if s.len() != 4 || bias.shape() != [s[1]] {
            return Err(CoreError::ShapeMismatch {
                op: "add_channel_bias",
                left: s,
                right: bias.shape().to_vec(),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let data = self.with_data(|x| {
            bias.with_data(|b| {
                let mut out = x.to_vec();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let bv = b[ci];
                        for v in &mut out[base..base + hw] {
                            *v += bv;
                        }
                    }
                }
                out
            })
        });
        let (pa, pb) = (self.clone(), bias.clone());
        Tensor::from_op(
            "add_channel_bias",
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            move || {
                Box::new(move |out: &Tensor| {
                    out.grad_ref(|g| {
                        pa.accumulate_grad(g);
                        let mut db = vec![0.0; c];
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * hw;
                                db[ci] += g[base..base + hw].iter().sum::<f64>();
                            }
                        }
                        pb.accumulate_grad(&db);
                    });
                })
            },
        )
    }

    /// (N,D) + bias(D), broadcast over rows.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape().to_vec();
        if s.len() != 2 || bias.shape() != [s[1]] {
            return Err(CoreError::ShapeMismatch {
                op: "add_row_bias",
                left: s,
                right: bias.shape().to_vec(),
            });
        }
        let (n, d) = (s[0], s[1]);
        let data = self.with_data(|x| {
            bias.with_data(|b| {
                let mut out = x.to_vec();
                for ni in 0..n {
                    for di in 0..d {
                        out[ni * d + di] += b[di];
                    }
                }
                out
            })
        });
        let (pa, pb) = (self.clone(), bias.clone());
        Tensor::from_op(
            "add_row_bias",
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            move || {
                Box::new(move |out: &Tensor| {
                    out.grad_ref(|g| {
                        pa.accumulate_grad(g);
                        let mut db = vec![0.0; d];
                        for ni in 0..n {
                            for di in 0..d {
                                db[di] += g[ni * d + di];
                            }
                        }
                        pb.accumulate_grad(&db);
                    });
                })
            },
        )
    }

    /// (N,C,H,W) + v(N,C), broadcast over space. This is how per-sample
    /// embeddings are injected into feature maps.
    pub fn add_sample_channel(&self, v: &Tensor) -> Result<Tensor> {
        let s = self.shape().to_vec();
        if s.len() != 4 || v.shape() != [s[0], s[1]] {
            return Err(CoreError::ShapeMismatch {
                op: "add_sample_channel",
                left: s,
                right: v.shape().to_vec(),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let data = self.with_data(|x| {
            v.with_data(|vv| {
                let mut out = x.to_vec();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let bv = vv[ni * c + ci];
                        for o in &mut out[base..base + hw] {
                            *o += bv;
                        }
                    }
                }
                out
            })
        });
        let (pa, pb) = (self.clone(), v.clone());
        Tensor::from_op(
            "add_sample_channel",
            self.shape().to_vec(),
            data,
            vec![self.clone(), v.clone()],
            move || {
                Box::new(move |out: &Tensor| {
                    out.grad_ref(|g| {
                        pa.accumulate_grad(g);
                        let mut dv = vec![0.0; n * c];
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * hw;
                                dv[ni * c + ci] = g[base..base + hw].iter().sum::<f64>();
                            }
                        }
                        pb.accumulate_grad(&dv);
                    });
                })
            },
        )
    }

    /// Scales sample `i` of a batch by `factors[i]`. The factors are plain
    /// constants (no gradient path), which is what per-sample noise-level
    /// coefficients need.
    pub fn scale_per_sample(&self, factors: &[f64]) -> Result<Tensor> {
        let s = self.shape();
        if s.is_empty() || s[0] != factors.len() {
            return Err(CoreError::invalid(
                "scale_per_sample",
                format!("{} factors for leading dim {:?}", factors.len(), s),
            ));
        }
        let per = self.numel() / s[0];
        let data = self.with_data(|x| {
            let mut out = x.to_vec();
            for (i, &f) in factors.iter().enumerate() {
                for v in &mut out[i * per..(i + 1) * per] {
                    *v *= f;
                }
            }
            out
        });
        let pa = self.clone();
        let fs = factors.to_vec();
        Tensor::from_op(
            "scale_per_sample",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move || {
                Box::new(move |out: &Tensor| {
                    out.grad_ref(|g| {
                        let mut da = g.to_vec();
                        for (i, &f) in fs.iter().enumerate() {
                            for v in &mut da[i * per..(i + 1) * per] {
                                *v *= f;
                            }
                        }
                        pa.accumulate_grad(&da);
                    });
                })
            },
        )
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(CoreError::invalid(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        let pa = self.clone();
        Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), vec![self.clone()], move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| pa.accumulate_grad(g));
            })
        })
    }

    /// Reorders axes and materializes the result contiguously.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(CoreError::invalid(
                "permute",
                format!("{:?} is not a permutation of 0..{}", perm, rank),
            ));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = contiguous_strides(&in_shape);
        // stride in the input for each output axis
        let gather_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let data = self.with_data(|x| gather_permuted(x, &out_shape, &gather_strides));
        let pa = self.clone();
        let perm_owned = perm.to_vec();
        Tensor::from_op("permute", out_shape.clone(), data, vec![self.clone()], move || {
            let in_shape = in_shape.clone();
            let perm_owned = perm_owned.clone();
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    // Scatter with the inverse permutation.
                    let mut inv = vec![0usize; perm_owned.len()];
                    for (i, &p) in perm_owned.iter().enumerate() {
                        inv[p] = i;
                    }
                    let out_shape: Vec<usize> = perm_owned.iter().map(|&p| in_shape[p]).collect();
                    let out_strides = contiguous_strides(&out_shape);
                    let gather: Vec<usize> = inv.iter().map(|&p| out_strides[p]).collect();
                    let da = gather_permuted(g, &in_shape, &gather);
                    pa.accumulate_grad(&da);
                });
            })
        })
    }

    /// Concatenates same-rank tensors along `dim`; all other dims must match.
    pub fn concat(parts: &[Tensor], dim: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(CoreError::invalid("concat", "no tensors given"));
        }
        let rank = parts[0].shape().len();
        if dim >= rank {
            return Err(CoreError::invalid("concat", format!("dim {dim} out of range for rank {rank}")));
        }
        let mut out_shape = parts[0].shape().to_vec();
        let mut cat_total = 0usize;
        for p in parts {
            if p.shape().len() != rank {
                return Err(CoreError::ShapeMismatch {
                    op: "concat",
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            for (d, (&a, &b)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
                if d != dim && a != b {
                    return Err(CoreError::ShapeMismatch {
                        op: "concat",
                        left: parts[0].shape().to_vec(),
                        right: p.shape().to_vec(),
                    });
                }
            }
            cat_total += p.shape()[dim];
        }
        out_shape[dim] = cat_total;

        let outer: usize = out_shape[..dim].iter().product();
        let inner: usize = out_shape[dim + 1..].iter().product();
        let mut data = vec![0.0; outer * cat_total * inner];
        let mut offset = 0usize;
        for p in parts {
            let span = p.shape()[dim] * inner;
            p.with_data(|src| {
                for o in 0..outer {
                    let dst = (o * cat_total + offset) * inner;
                    data[dst..dst + span].copy_from_slice(&src[o * span..(o + 1) * span]);
                }
            });
            offset += p.shape()[dim];
        }

        let parents: Vec<Tensor> = parts.to_vec();
        let spans: Vec<usize> = parts.iter().map(|p| p.shape()[dim]).collect();
        let parents_for_back = parents.clone();
        Tensor::from_op("concat", out_shape, data, parents, move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    let mut offset = 0usize;
                    for (p, &span_dim) in parents_for_back.iter().zip(&spans) {
                        let span = span_dim * inner;
                        let mut dp = vec![0.0; outer * span];
                        for o in 0..outer {
                            let src = (o * cat_total + offset) * inner;
                            dp[o * span..(o + 1) * span].copy_from_slice(&g[src..src + span]);
                        }
                        p.accumulate_grad(&dp);
                        offset += span_dim;
                    }
                });
            })
        })
    }

    // ── Matrix products ─────────────────────────────────────────────────

    /// (M,K) · (K,N) → (M,N).
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        self.with_data(|a| rhs.with_data(|b| mm_nn(a, b, m, k, n, &mut data)));
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::from_op("matmul", vec![m, n], data, vec![self.clone(), rhs.clone()], move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    let mut da = vec![0.0; m * k];
                    pb.with_data(|b| mm_nt(g, b, m, n, k, &mut da));
                    pa.accumulate_grad(&da);
                    let mut db = vec![0.0; k * n];
                    pa.with_data(|a| mm_tn(a, g, m, k, n, &mut db));
                    pb.accumulate_grad(&db);
                });
            })
        })
    }

    /// (M,K) · (N,K)ᵀ → (M,N); the x·Wᵀ product of a linear layer.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(CoreError::ShapeMismatch {
                op: "matmul_nt",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut data = vec![0.0; m * n];
        self.with_data(|a| rhs.with_data(|b| mm_nt(a, b, m, k, n, &mut data)));
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::from_op("matmul_nt", vec![m, n], data, vec![self.clone(), rhs.clone()], move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    // C = A·Bᵀ ⇒ dA = dC·B, dB = dCᵀ·A
                    let mut da = vec![0.0; m * k];
                    pb.with_data(|b| mm_nn(g, b, m, n, k, &mut da));
                    pa.accumulate_grad(&da);
                    let mut db = vec![0.0; n * k];
                    pa.with_data(|a| mm_tn(g, a, m, n, k, &mut db));
                    pb.accumulate_grad(&db);
                });
            })
        })
    }

    /// Batched (B,M,K) · (B,K,N) → (B,M,N).
    pub fn bmm(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(CoreError::ShapeMismatch {
                op: "bmm",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; bs * m * n];
        self.with_data(|a| {
            rhs.with_data(|b| {
                for bi in 0..bs {
                    mm_nn(
                        &a[bi * m * k..(bi + 1) * m * k],
                        &b[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut data[bi * m * n..(bi + 1) * m * n],
                    );
                }
            })
        });
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::from_op("bmm", vec![bs, m, n], data, vec![self.clone(), rhs.clone()], move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    let mut da = vec![0.0; bs * m * k];
                    let mut db = vec![0.0; bs * k * n];
                    pb.with_data(|b| {
                        pa.with_data(|a| {
                            for bi in 0..bs {
                                let gb = &g[bi * m * n..(bi + 1) * m * n];
                                mm_nt(gb, &b[bi * k * n..(bi + 1) * k * n], m, n, k, &mut da[bi * m * k..(bi + 1) * m * k]);
                                mm_tn(&a[bi * m * k..(bi + 1) * m * k], gb, m, k, n, &mut db[bi * k * n..(bi + 1) * k * n]);
                            }
                        })
                    });
                    pa.accumulate_grad(&da);
                    pb.accumulate_grad(&db);
                });
            })
        })
    }

    /// Batched (B,M,K) · (B,N,K)ᵀ → (B,M,N); the query·keyᵀ shape.
    pub fn bmm_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(CoreError::ShapeMismatch {
                op: "bmm_nt",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut data = vec![0.0; bs * m * n];
        self.with_data(|a| {
            rhs.with_data(|b| {
                for bi in 0..bs {
                    mm_nt(
                        &a[bi * m * k..(bi + 1) * m * k],
                        &b[bi * n * k..(bi + 1) * n * k],
                        m,
                        k,
                        n,
                        &mut data[bi * m * n..(bi + 1) * m * n],
                    );
                }
            })
        });
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::from_op("bmm_nt", vec![bs, m, n], data, vec![self.clone(), rhs.clone()], move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    // C = A·Bᵀ ⇒ dA = dC·B, dB = dCᵀ·A
                    let mut da = vec![0.0; bs * m * k];
                    let mut db = vec![0.0; bs * n * k];
                    pb.with_data(|b| {
                        pa.with_data(|a| {
                            for bi in 0..bs {
                                let gb = &g[bi * m * n..(bi + 1) * m * n];
                                mm_nn(gb, &b[bi * n * k..(bi + 1) * n * k], m, n, k, &mut da[bi * m * k..(bi + 1) * m * k]);
                                mm_tn(gb, &a[bi * m * k..(bi + 1) * m * k], m, n, k, &mut db[bi * n * k..(bi + 1) * n * k]);
                            }
                        })
                    });
                    pa.accumulate_grad(&da);
                    pb.accumulate_grad(&db);
                });
            })
        })
    }

    /// Softmax over the last axis, numerically stabilized.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.is_empty() {
            return Err(CoreError::invalid("softmax_last", "rank-0 tensor"));
        }
        let d = s[s.len() - 1];
        if d == 0 {
            return Err(CoreError::invalid("softmax_last", "empty last axis"));
        }
        let rows = self.numel() / d;
        let data = self.with_data(|x| {
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                    let e = (v - m).exp();
                    *o = e;
                    sum += e;
                }
                for o in &mut out[r * d..(r + 1) * d] {
                    *o /= sum;
                }
            }
            out
        });
        let pa = self.clone();
        let probs = data.clone();
        Tensor::from_op("softmax_last", s.to_vec(), data, vec![self.clone()], move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    let mut da = vec![0.0; probs.len()];
                    for r in 0..rows {
                        let p = &probs[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = p.iter().zip(gr).map(|(pv, gv)| pv * gv).sum();
                        for ((o, &pv), &gv) in da[r * d..(r + 1) * d].iter_mut().zip(p).zip(gr) {
                            *o = pv * (gv - dot);
                        }
                    }
                    pa.accumulate_grad(&da);
                });
            })
        })
    }
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn gather_permuted(src: &[f64], out_shape: &[usize], gather_strides: &[usize]) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    for o in out.iter_mut() {
        *o = src[src_off];
        // odometer increment
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src_off += gather_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src_off -= gather_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
