//! Layers, initialization, optimization and checkpoint serialization.
//!
//! Layers are plain structs holding their parameter tensors; models expose
//! their parameters through [`collect_params`](Linear::collect_params)-style
//! methods that build `(name, tensor)` lists with dotted prefixes. That flat
//! list is what the optimizer, the checkpoint writer and the parameter
//! counters all consume.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Kaiming-uniform fan-in initialization: U(−√(6/fan_in), +√(6/fan_in)).
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(CoreError::invalid("kaiming_uniform", "fan_in must be positive"));
    }
    let bound = (6.0 / fan_in as f64).sqrt();
    let t = Tensor::rand_uniform(rng, shape, -bound, bound)?;
    Tensor::param(t.to_vec(), shape)
}

/// Largest of {8,4,2,1} that divides the channel count; the default group
/// count for normalization layers at these model widths.
pub fn default_groups(channels: usize) -> usize {
    for g in [8, 4, 2] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

// ── Linear ──────────────────────────────────────────────────────────────

pub struct Linear {
    pub weight: Tensor, // (out, in)
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weight = kaiming_uniform(rng, &[out_dim, in_dim], in_dim)?;
        let bias = if bias {
            Some(Tensor::param(vec![0.0; out_dim], &[out_dim])?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    /// Zeroes the weight in place; see [`Conv2d::zero_init`].
    pub fn zero_init(self) -> Result<Self> {
        self.weight.set_data(&vec![0.0; self.weight.numel()])?;
        Ok(self)
    }

    /// x(N,in) → (N,out)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul_nt(&self.weight)?;
        match &self.bias {
            Some(b) => y.add_row_bias(b),
            None => Ok(y),
        }
    }

    /// x(B,T,in) → (B,T,out), applied per token.
    pub fn forward_tokens(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape().to_vec();
        if s.len() != 3 {
            return Err(CoreError::invalid("linear", format!("expected (B,T,D), got {s:?}")));
        }
        let flat = x.reshape(&[s[0] * s[1], s[2]])?;
        let y = self.forward(&flat)?;
        let out_dim = self.weight.shape()[0];
        y.reshape(&[s[0], s[1], out_dim])
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

// ── Conv2d ──────────────────────────────────────────────────────────────

pub struct Conv2d {
    pub weight: Tensor, // (out, in, k, k)
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = kaiming_uniform(rng, &[out_ch, in_ch, k, k], in_ch * k * k)?;
        let bias = if bias {
            Some(Tensor::param(vec![0.0; out_ch], &[out_ch])?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// Zeroes the weight (and bias) in place. Residual branches start as
    /// identity maps this way: a freshly stacked network computes zero
    /// instead of amplified noise, so early optimizer steps grow useful
    /// pathways rather than strangling random ones.
    pub fn zero_init(self) -> Result<Self> {
        self.weight.set_data(&vec![0.0; self.weight.numel()])?;
        Ok(self)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.pad)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

// ── GroupNorm ───────────────────────────────────────────────────────────

pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Result<Self> {
        Ok(GroupNorm {
            groups,
            gamma: Tensor::param(vec![1.0; channels], &[channels])?,
            beta: Tensor::param(vec![0.0; channels], &[channels])?,
            eps: 1e-5,
        })
    }

    pub fn with_default_groups(channels: usize) -> Result<Self> {
        Self::new(channels, default_groups(channels))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.group_norm(self.groups, Some(&self.gamma), Some(&self.beta), self.eps)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

// ── Attention ───────────────────────────────────────────────────────────

/// Multi-head scaled dot-product attention over token sequences. Passing
/// the query source as the context gives self-attention; a cross context
/// may have a different embedding width.
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn new(dim_q: usize, dim_ctx: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || dim_q % heads != 0 {
            return Err(CoreError::invalid(
                "attention",
                format!("{dim_q} query channels not divisible into {heads} heads"),
            ));
        }
        Ok(Attention {
            heads,
            q: Linear::new(dim_q, dim_q, false, rng)?,
            k: Linear::new(dim_ctx, dim_q, false, rng)?,
            v: Linear::new(dim_ctx, dim_q, false, rng)?,
            out: Linear::new(dim_q, dim_q, true, rng)?.zero_init()?,
        })
    }

    /// query(B,Tq,Dq), context(B,Tc,Dc) → (B,Tq,Dq)
    pub fn forward(&self, query: &Tensor, context: &Tensor) -> Result<Tensor> {
        let qs = query.shape().to_vec();
        let cs = context.shape().to_vec();
        if qs.len() != 3 || cs.len() != 3 || qs[0] != cs[0] {
            return Err(CoreError::ShapeMismatch {
                op: "attention",
                left: qs,
                right: cs,
            });
        }
        let (b, tq, dq) = (qs[0], qs[1], qs[2]);
        let tc = cs[1];
        let h = self.heads;
        let dh = dq / h;

        let split = |t: &Tensor, tokens: usize| -> Result<Tensor> {
            t.reshape(&[b, tokens, h, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * h, tokens, dh])
        };
        let q = split(&self.q.forward_tokens(query)?, tq)?;
        let k = split(&self.k.forward_tokens(context)?, tc)?;
        let v = split(&self.v.forward_tokens(context)?, tc)?;

        let scores = q.bmm_nt(&k)?.mul_scalar(1.0 / (dh as f64).sqrt())?;
        let probs = scores.softmax_last()?;
        let mixed = probs.bmm(&v)?; // (B·h, Tq, dh)
        let merged = mixed
            .reshape(&[b, h, tq, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, tq, dq])?;
        self.out.forward_tokens(&merged)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.q.collect_params(&format!("{prefix}.q"), out);
        self.k.collect_params(&format!("{prefix}.k"), out);
        self.v.collect_params(&format!("{prefix}.v"), out);
        self.out.collect_params(&format!("{prefix}.out"), out);
    }
}

// ── Residual block ──────────────────────────────────────────────────────

/// norm → silu → conv, with an optional per-sample embedding injection
/// between the two convolutions and a 1×1 skip when widths change.
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub emb_proj: Option<Linear>,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(in_ch: usize, out_ch: usize, emb_dim: Option<usize>, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ResBlock {
            norm1: GroupNorm::with_default_groups(in_ch)?,
            conv1: Conv2d::new(in_ch, out_ch, 3, 1, 1, true, rng)?,
            emb_proj: emb_dim.map(|d| Linear::new(d, out_ch, true, rng)).transpose()?,
            norm2: GroupNorm::with_default_groups(out_ch)?,
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, true, rng)?.zero_init()?,
            skip: if in_ch != out_ch {
                Some(Conv2d::new(in_ch, out_ch, 1, 1, 0, true, rng)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, emb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        match (&self.emb_proj, emb) {
            (Some(proj), Some(e)) => {
                let shift = proj.forward(&e.silu()?)?; // (B, out_ch)
                h = h.add_sample_channel(&shift)?;
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(CoreError::invalid("res_block", "missing embedding input"));
            }
            (None, Some(_)) => {
                return Err(CoreError::invalid("res_block", "block built without embedding projection"));
            }
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let shortcut = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        shortcut.add(&h)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm1.collect_params(&format!("{prefix}.norm1"), out);
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        if let Some(p) = &self.emb_proj {
            p.collect_params(&format!("{prefix}.emb_proj"), out);
        }
        self.norm2.collect_params(&format!("{prefix}.norm2"), out);
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
        if let Some(s) = &self.skip {
            s.collect_params(&format!("{prefix}.skip"), out);
        }
    }
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// AdamW with decoupled weight decay. Moment buffers key off tensor
/// identity, so one optimizer instance can drive any stable parameter list.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Ceiling on the global L2 norm of the concatenated gradients. When a
    /// step's gradients exceed it they are rescaled to this norm before the
    /// moment updates, so one outlier batch cannot blow up the weights.
    /// `None` disables clipping.
    pub clip_norm: Option<f64>,
    t: u64,
    m: HashMap<u64, Vec<f64>>,
    v: HashMap<u64, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: None,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient, then
    /// leaves the gradients in place (call [`AdamW::zero_grad`] to clear).
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        let scale = match self.clip_norm {
            Some(max) if max > 0.0 => {
                let sq: f64 = params
                    .iter()
                    .filter_map(|(_, p)| p.grad())
                    .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                    .sum();
                let norm = sq.sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (_, p) in params {
            let Some(grad) = p.grad() else { continue };
            let m = self.m.entry(p.id()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(p.id()).or_insert_with(|| vec![0.0; grad.len()]);
            let mut update = Vec::with_capacity(grad.len());
            let current = p.to_vec();
            for i in 0..grad.len() {
                let g = grad[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                update.push(self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * current[i]));
            }
            let mut it = update.into_iter();
            p.apply_update(|val| *val -= it.next().expect("update length matches"))?;
        }
        Ok(())
    }

    pub fn zero_grad(&self, params: &[(String, Tensor)]) {
        for (_, p) in params {
            p.zero_grad();
        }
    }
}

/// Cosine decay from `base` at step 0 to `floor` at step `total - 1`.
/// Training loops assign the result to [`AdamW::lr`] each step: the early
/// phase keeps the full rate to grow pathways out of the zero
/// initialization, the late phase anneals so memorization can tighten
/// without destabilizing.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total <= 1 || step + 1 >= total {
        return if total <= 1 { base } else { floor };
    }
    let frac = step as f64 / (total - 1) as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
}

// ── Parameter bookkeeping ───────────────────────────────────────────────

/// Total element count of a parameter list.
pub fn param_count(params: &[(String, Tensor)]) -> u64 {
    params.iter().map(|(_, p)| p.numel() as u64).sum()
}

/// A `Send`-able snapshot of parameter values, used to move models across
/// worker threads (graphs themselves are thread-confined) and to implement
/// checkpointing.
pub type StateDict = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

pub fn state_dict(params: &[(String, Tensor)]) -> StateDict {
    params
        .iter()
        .map(|(name, p)| (name.clone(), (p.shape().to_vec(), p.to_vec())))
        .collect()
}

/// Loads a snapshot into an existing parameter list. Every parameter must
/// be present with the right shape, and no extra entries may remain.
pub fn load_state_dict(params: &[(String, Tensor)], state: &StateDict) -> Result<()> {
    let mut seen = 0usize;
    for (name, p) in params {
        let (shape, values) = state
            .get(name)
            .ok_or_else(|| CoreError::Checkpoint(format!("missing parameter {name}")))?;
        if shape != p.shape() {
            return Err(CoreError::Checkpoint(format!(
                "shape mismatch for {name}: file has {:?}, model needs {:?}",
                shape,
                p.shape()
            )));
        }
        p.set_data(values)?;
        seen += 1;
    }
    if seen != state.len() {
        let known: Vec<&String> = params.iter().map(|(n, _)| n).collect();
        let extra: Vec<&str> = state
            .keys()
            .filter(|k| !known.iter().any(|n| n == k))
            .map(|s| s.as_str())
            .collect();
        return Err(CoreError::Checkpoint(format!(
            "checkpoint has {} unknown parameters: {}",
            extra.len(),
            extra.join(", ")
        )));
    }
    Ok(())
}

// ── Checkpoint file format ──────────────────────────────────────────────
//
// magic "C2GMCKPT" | version u32 LE | repeated records until EOF:
//   name_len u32 LE | name bytes (UTF-8) | rank u32 LE | extents u64 LE ×rank
//   | payload f64 LE ×numel

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"C2GMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, p) in params {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &e in p.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        p.with_data(|data| {
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        });
    }
    let mut file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    file.write_all(&buf).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<StateDict> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CoreError::io(path, e))?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<StateDict> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(CoreError::Checkpoint(format!(
                "truncated at byte {} (wanted {} more)",
                *pos, n
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 8)? != CHECKPOINT_MAGIC {
        return Err(CoreError::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::Checkpoint(format!("unsupported version {version}")));
    }

    let mut state = StateDict::new();
    while pos < bytes.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| CoreError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(&mut pos, numel * 8)?;
        let mut values = Vec::with_capacity(numel);
        for chunk in payload.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(CoreError::Checkpoint(format!("non-finite value in {name}")));
            }
            values.push(v);
        }
        if state.insert(name.clone(), (shape, values)).is_some() {
            return Err(CoreError::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    Ok(state)
}

pub fn load_checkpoint_into(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    let state = read_checkpoint(path)?;
    load_state_dict(params, &state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn kaiming_bound_scales_with_fan_in() {
        let mut rng = rng_from_seed(1);
        let t = kaiming_uniform(&mut rng, &[64, 16], 16).unwrap();
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(t.to_vec().iter().all(|v| v.abs() < bound));
        // and values actually use the range
        assert!(t.to_vec().iter().any(|v| v.abs() > bound * 0.5));
    }

    #[test]
    fn linear_bias_starts_at_zero() {
        let mut rng = rng_from_seed(2);
        let l = Linear::new(4, 3, true, &mut rng).unwrap();
        assert_eq!(l.bias.unwrap().to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn single_context_token_attends_fully() {
        // With one context token the softmax is exactly 1, so the output is
        // the out-projection of that token's value. Identity projections
        // make the equality visible end to end.
        let mut rng = rng_from_seed(3);
        let attn = Attention::new(4, 4, 2, &mut rng).unwrap();
        let eye = |d: usize| {
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                m[i * d + i] = 1.0;
            }
            m
        };
        attn.v.weight.set_data(&eye(4)).unwrap();
        attn.out.weight.set_data(&eye(4)).unwrap();
        let ctx = Tensor::from_vec(vec![0.4, -1.2, 2.0, 0.3], &[1, 1, 4]).unwrap();
        let q = Tensor::from_vec(vec![5.0, 5.0, 5.0, 5.0], &[1, 1, 4]).unwrap();
        let out = attn.forward(&q, &ctx).unwrap();
        for (o, c) in out.to_vec().iter().zip(ctx.to_vec()) {
            assert!((o - c).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_query_projection_averages_values() {
        let mut rng = rng_from_seed(4);
        let attn = Attention::new(2, 2, 1, &mut rng).unwrap();
        attn.q.weight.set_data(&[0.0; 4]).unwrap();
        let eye2 = [1.0, 0.0, 0.0, 1.0];
        attn.v.weight.set_data(&eye2).unwrap();
        attn.out.weight.set_data(&eye2).unwrap();
        // Three context tokens; uniform logits → plain mean of the values.
        let ctx = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 3, 2]).unwrap();
        let q = Tensor::from_vec(vec![9.0, -9.0], &[1, 1, 2]).unwrap();
        let out = attn.forward(&q, &ctx).unwrap();
        let v = out.to_vec();
        assert!((v[0] - 3.0).abs() < 1e-12);
        assert!((v[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut rng = rng_from_seed(5);
        assert!(Attention::new(6, 6, 4, &mut rng).is_err());
    }

    #[test]
    fn adamw_with_zero_lr_leaves_parameters_unchanged() {
        let mut rng = rng_from_seed(6);
        let p = kaiming_uniform(&mut rng, &[8], 8).unwrap();
        let before = p.to_vec();
        let params = vec![("p".to_string(), p.clone())];
        let loss = p.mul(&p).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        let mut opt = AdamW::new(0.0, 0.01);
        opt.step(&params).unwrap();
        assert_eq!(p.to_vec(), before);
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let p = Tensor::param(vec![5.0], &[1]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        let mut opt = AdamW::new(0.1, 0.0);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            opt.zero_grad(&params);
            let loss = p.mul(&p).unwrap().sum_all().unwrap();
            loss.backward().unwrap();
            opt.step(&params).unwrap();
            let now = loss.item().unwrap();
            assert!(now <= last + 1e-9);
            last = now;
        }
        assert!(p.to_vec()[0].abs() < 5.0 * 0.5);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = rng_from_seed(7);
        let a = kaiming_uniform(&mut rng, &[3, 4], 4).unwrap();
        let b = Tensor::param(vec![0.25, -0.5], &[2]).unwrap();
        let params = vec![("layer.weight".to_string(), a.clone()), ("layer.bias".to_string(), b.clone())];
        save_checkpoint(&path, &params).unwrap();

        let state = read_checkpoint(&path).unwrap();
        assert_eq!(state["layer.weight"].0, vec![3, 4]);
        assert_eq!(state["layer.weight"].1, a.to_vec());
        assert_eq!(state["layer.bias"].1, b.to_vec());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        assert!(parse_checkpoint(b"NOTMAGIC....").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = Tensor::param(vec![1.0; 6], &[2, 3]).unwrap();
        let params = vec![("w".to_string(), p)];
        save_checkpoint(&path, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(parse_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn load_rejects_shape_mismatch_and_unknown_names() {
        let p = Tensor::param(vec![1.0; 4], &[4]).unwrap();
        let params = vec![("w".to_string(), p)];
        let mut state = StateDict::new();
        state.insert("w".to_string(), (vec![2, 2], vec![0.0; 4]));
        assert!(load_state_dict(&params, &state).is_err());

        let mut state2 = StateDict::new();
        state2.insert("w".to_string(), (vec![4], vec![0.0; 4]));
        state2.insert("stray".to_string(), (vec![1], vec![0.0]));
        assert!(load_state_dict(&params, &state2).is_err());
    }

    #[test]
    fn state_dict_round_trip_restores_values() {
        let mut rng = rng_from_seed(8);
        let p = kaiming_uniform(&mut rng, &[5], 5).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        let saved = state_dict(&params);
        p.set_data(&[0.0; 5]).unwrap();
        load_state_dict(&params, &saved).unwrap();
        assert_eq!(p.to_vec(), saved["p"].1);
    }
}
