//! Condition assembly for the denoiser: scale-text and timestep embeddings,
//! cascade-reference fusion, the dual-branch map feature encoder and the
//! adapter that turns its output into per-tier additive features.
//!
//! The text encoder is a deterministic stand-in with the interface of a
//! pretrained cross-modal encoder: hashed token embeddings, mean pooling, a
//! frozen seeded projection and L2 normalization. Semantic quality is a non
//! goal; determinism, distinctness across prompts and a stable dimension are
//! what the rest of the pipeline relies on.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::nn::{Conv2d, ResBlock};
use crate::rng::{splitmix64, stream_rng};
use crate::tensor::Tensor;

/// Everything the denoiser consumes besides the noisy latent itself.
pub struct Condition {
    /// Combined scale + time embedding, [1, D].
    pub embedding: Tensor,
    /// Noisy latent with cascade-reference features concatenated, [N, C+Cr, h, w].
    pub fused_latent: Tensor,
    /// Multi-scale additive features, extents halving per entry.
    pub sf_features: Vec<Tensor>,
}

// ── Text embedding ──────────────────────────────────────────────────────

pub struct TextEncoder {
    dim: usize,
    seed: u64,
    /// Frozen [D, D] projection applied after mean pooling.
    proj: Tensor,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

impl TextEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<TextEncoder> {
        if dim == 0 {
            return Err(CoreError::invalid("text_encoder", "zero embedding dim"));
        }
        let mut rng = stream_rng(seed, "text-proj");
        let scale = 1.0 / (dim as f64).sqrt();
        let w: Vec<f64> = (0..dim * dim)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * scale
            })
            .collect();
        Ok(TextEncoder {
            dim,
            seed,
            proj: Tensor::from_vec(w, &[dim, dim])?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Deterministic unit-norm embedding of a prompt, [1, D].
    pub fn encode(&self, prompt: &str) -> Result<Tensor> {
        let tokens = tokenize(prompt);
        if tokens.is_empty() {
            return Err(CoreError::Contract(format!(
                "prompt {prompt:?} has no tokens to embed"
            )));
        }
        let mut pooled = vec![0.0; self.dim];
        for tok in &tokens {
            let token_seed = splitmix64(fnv1a64(tok.as_bytes()) ^ splitmix64(self.seed));
            let mut rng = crate::rng::rng_from_seed(token_seed);
            for slot in pooled.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *slot += g;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        for v in pooled.iter_mut() {
            *v *= inv;
        }
        let pooled = Tensor::from_vec(pooled, &[1, self.dim])?;
        let projected = pooled.matmul_nt(&self.proj)?;
        let vec = projected.to_vec();
        let norm: f64 = vec.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(CoreError::Contract(
                "text embedding collapsed to zero norm".into(),
            ));
        }
        projected.mul_scalar(1.0 / norm)
    }
}

// ── Time embedding ──────────────────────────────────────────────────────

/// Sinusoidal timestep encoding, [1, D]: pair i holds
/// sin(t / 10000^(2i/D)) and cos(t / 10000^(2i/D)). D must be even.
pub fn encode_time(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(CoreError::invalid(
            "encode_time",
            format!("dimension {dim} must be positive and even"),
        ));
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        let angle = t as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Tensor::from_vec(out, &[1, dim])
}

/// Elementwise sum of scale and time embeddings.
pub fn combine_embeddings(e_s: &Tensor, e_t: &Tensor) -> Result<Tensor> {
    if e_s.shape() != e_t.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "combine_embeddings",
            left: e_s.shape().to_vec(),
            right: e_t.shape().to_vec(),
        });
    }
    e_s.add(e_t)
}

// ── Cascade-reference fusion ────────────────────────────────────────────

/// Encodes the parent-tile reference image and concatenates the resulting
/// feature planes onto the noisy latent along the channel dimension.
pub struct CascadeFuser {
    feature_channels: usize,
    down1: Conv2d,
    down2: Conv2d,
    /// Alignment conv applied after resampling to the latent extents.
    align: Conv2d,
}

impl CascadeFuser {
    pub fn new(feature_channels: usize, seed: u64) -> Result<CascadeFuser> {
        if feature_channels == 0 {
            return Err(CoreError::invalid("cascade_fuser", "zero feature channels"));
        }
        let mut rng = stream_rng(seed, "cascade-fuser");
        Ok(CascadeFuser {
            feature_channels,
            down1: Conv2d::new(3, feature_channels, 3, 2, 1, true, &mut rng)?,
            down2: Conv2d::new(feature_channels, feature_channels, 3, 2, 1, true, &mut rng)?,
            align: Conv2d::new(feature_channels, feature_channels, 3, 1, 1, true, &mut rng)?,
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.feature_channels
    }

    /// Reference image [N, 3, H, W] -> features [N, Cr, out_h, out_w].
    pub fn encode(&self, reference: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let s = reference.shape();
        if s.len() != 4 || s[1] != 3 || s[2] < 4 || s[3] < 4 {
            return Err(CoreError::invalid(
                "cascade_encode",
                format!("expected [N,3,H>=4,W>=4] reference, got {s:?}"),
            ));
        }
        let h = self.down1.forward(reference)?.silu()?;
        let h = self.down2.forward(&h)?.silu()?;
        let h = h.resample_bicubic(out_h, out_w)?;
        self.align.forward(&h)
    }

    /// x̃_t = concat[z_t, f_up(E_lr(reference))] along channels.
    pub fn fuse(&self, z_t: &Tensor, reference: &Tensor) -> Result<Tensor> {
        let zs = z_t.shape();
        if zs.len() != 4 {
            return Err(CoreError::invalid(
                "fuse_cascade",
                format!("latent must be [N,C,h,w], got {zs:?}"),
            ));
        }
        if reference.shape()[0] != zs[0] {
            return Err(CoreError::ShapeMismatch {
                op: "fuse_cascade",
                left: zs.to_vec(),
                right: reference.shape().to_vec(),
            });
        }
        let feats = self.encode(reference, zs[2], zs[3])?;
        Tensor::concat(&[z_t.clone(), feats], 1)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.down1.collect_params(&format!("{prefix}.down1"), out);
        self.down2.collect_params(&format!("{prefix}.down2"), out);
        self.align.collect_params(&format!("{prefix}.align"), out);
    }
}

// ── Spatially adaptive fusion ───────────────────────────────────────────

/// Normalizes `x` without learned affine parameters, then modulates it with
/// spatial scale and offset maps computed from the context (which sees both
/// the context planes and `x` itself): out = norm(x) * (1 + gamma) + beta.
pub struct SpadeBlock {
    trunk: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

impl SpadeBlock {
    pub fn new(
        x_channels: usize,
        ctx_channels: usize,
        hidden: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<SpadeBlock> {
        Ok(SpadeBlock {
            trunk: Conv2d::new(ctx_channels + x_channels, hidden, 3, 1, 1, true, rng)?,
            gamma: Conv2d::new(hidden, x_channels, 3, 1, 1, true, rng)?,
            beta: Conv2d::new(hidden, x_channels, 3, 1, 1, true, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (xs, cs) = (x.shape(), ctx.shape());
        if xs.len() != 4 || cs.len() != 4 || xs[0] != cs[0] || xs[2..] != cs[2..] {
            return Err(CoreError::ShapeMismatch {
                op: "spade_fuse",
                left: xs.to_vec(),
                right: cs.to_vec(),
            });
        }
        let ctx_hat = Tensor::concat(&[ctx.clone(), x.clone()], 1)?;
        let h = self.trunk.forward(&ctx_hat)?.silu()?;
        let gamma = self.gamma.forward(&h)?;
        let beta = self.beta.forward(&h)?;
        x.instance_norm(1e-5)?
            .mul(&gamma.add_scalar(1.0)?)?
            .add(&beta)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.trunk.collect_params(&format!("{prefix}.trunk"), out);
        self.gamma.collect_params(&format!("{prefix}.gamma"), out);
        self.beta.collect_params(&format!("{prefix}.beta"), out);
    }
}

// ── Map feature encoder ─────────────────────────────────────────────────

/// Dual-branch encoder: a remote-sensing branch and a reference branch,
/// fused spatially at each scale, then brought down to latent extents.
/// With the reference branch zeroed the output is a function of the RS
/// input alone.
pub struct MFEncoder {
    factor: usize,
    num_scales: usize,
    rs_stem: Conv2d,
    ref_stem: Conv2d,
    spades: Vec<SpadeBlock>,
    rs_down: Vec<Conv2d>,
    ref_down: Vec<Conv2d>,
    extra_down: Vec<Conv2d>,
    out: Conv2d,
}

impl MFEncoder {
    pub fn new(
        width: usize,
        cond_channels: usize,
        factor: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<MFEncoder> {
        if factor < 2 || !factor.is_power_of_two() {
            return Err(CoreError::invalid(
                "mfencoder",
                format!("factor {factor} must be a power of two >= 2"),
            ));
        }
        if width == 0 || cond_channels == 0 {
            return Err(CoreError::invalid("mfencoder", "zero-width layer"));
        }
        let log2f = factor.trailing_zeros() as usize;
        let num_scales = (log2f + 1).min(3);
        let mut spades = Vec::new();
        let mut rs_down = Vec::new();
        let mut ref_down = Vec::new();
        for s in 0..num_scales {
            spades.push(SpadeBlock::new(width, width, width, rng)?);
            if s + 1 < num_scales {
                rs_down.push(Conv2d::new(width, width, 3, 2, 1, true, rng)?);
                ref_down.push(Conv2d::new(width, width, 3, 2, 1, true, rng)?);
            }
        }
        let mut extra_down = Vec::new();
        for _ in 0..log2f + 1 - num_scales {
            extra_down.push(Conv2d::new(width, width, 3, 2, 1, true, rng)?);
        }
        Ok(MFEncoder {
            factor,
            num_scales,
            rs_stem: Conv2d::new(3, width, 3, 1, 1, true, rng)?,
            ref_stem: Conv2d::new(3, width, 3, 1, 1, true, rng)?,
            spades,
            rs_down,
            ref_down,
            extra_down,
            out: Conv2d::new(width, cond_channels, 3, 1, 1, true, rng)?,
        })
    }

    /// rs and reference both [N, 3, H, W] with H, W divisible by the latent
    /// factor; output F_cond is [N, cond_channels, H/f, W/f].
    pub fn forward(&self, rs: &Tensor, reference: &Tensor) -> Result<Tensor> {
        let (rss, refs) = (rs.shape(), reference.shape());
        if rss != refs {
            return Err(CoreError::ShapeMismatch {
                op: "mfencoder",
                left: rss.to_vec(),
                right: refs.to_vec(),
            });
        }
        if rss.len() != 4 || rss[1] != 3 || rss[2] % self.factor != 0 || rss[3] % self.factor != 0 {
            return Err(CoreError::invalid(
                "mfencoder",
                format!("expected [N,3,H,W] divisible by {}, got {rss:?}", self.factor),
            ));
        }
        let mut r = self.rs_stem.forward(rs)?.silu()?;
        let mut c = self.ref_stem.forward(reference)?.silu()?;
        for s in 0..self.num_scales {
            let fused = self.spades[s].forward(&r, &c)?;
            if s + 1 < self.num_scales {
                r = self.rs_down[s].forward(&fused)?.silu()?;
                c = self.ref_down[s].forward(&c)?.silu()?;
            } else {
                r = fused;
            }
        }
        for d in &self.extra_down {
            r = d.forward(&r)?.silu()?;
        }
        self.out.forward(&r)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.rs_stem.collect_params(&format!("{prefix}.rs_stem"), out);
        self.ref_stem.collect_params(&format!("{prefix}.ref_stem"), out);
        for (i, s) in self.spades.iter().enumerate() {
            s.collect_params(&format!("{prefix}.spade{i}"), out);
        }
        for (i, d) in self.rs_down.iter().enumerate() {
            d.collect_params(&format!("{prefix}.rs_down{i}"), out);
        }
        for (i, d) in self.ref_down.iter().enumerate() {
            d.collect_params(&format!("{prefix}.ref_down{i}"), out);
        }
        for (i, d) in self.extra_down.iter().enumerate() {
            d.collect_params(&format!("{prefix}.extra_down{i}"), out);
        }
        self.out.collect_params(&format!("{prefix}.out"), out);
    }

    /// Zero every parameter on the reference branch, making the output a
    /// function of the RS input alone.
    pub fn zero_reference_branch(&self) {
        let mut params = Vec::new();
        self.ref_stem.collect_params("z", &mut params);
        for d in &self.ref_down {
            d.collect_params("z", &mut params);
        }
        for (_, p) in params {
            p.set_data(&vec![0.0; p.numel()]).expect("zeroing params");
        }
    }
}

// ── Scale feature adapter ───────────────────────────────────────────────

/// Turns F_cond into three additive feature maps whose extents halve and
/// whose channel counts match the denoiser's resolution tiers. Each tier
/// ends in a zero-initialized 1x1 projection, so a fresh adapter injects
/// nothing and the host network's behaviour is unchanged until training
/// grows the conditioning pathway.
pub struct SFAdapter {
    stem: Conv2d,
    res0: ResBlock,
    down1: Conv2d,
    res1: ResBlock,
    down2: Conv2d,
    res2: ResBlock,
    inject0: Conv2d,
    inject1: Conv2d,
    inject2: Conv2d,
}

impl SFAdapter {
    pub fn new(
        cond_channels: usize,
        tier_channels: [usize; 3],
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<SFAdapter> {
        let [t0, t1, t2] = tier_channels;
        Ok(SFAdapter {
            stem: Conv2d::new(cond_channels, t0, 3, 1, 1, true, rng)?,
            res0: ResBlock::new(t0, t0, None, rng)?,
            down1: Conv2d::new(t0, t1, 3, 2, 1, true, rng)?,
            res1: ResBlock::new(t1, t1, None, rng)?,
            down2: Conv2d::new(t1, t2, 3, 2, 1, true, rng)?,
            res2: ResBlock::new(t2, t2, None, rng)?,
            inject0: Conv2d::new(t0, t0, 1, 1, 0, true, rng)?.zero_init()?,
            inject1: Conv2d::new(t1, t1, 1, 1, 0, true, rng)?.zero_init()?,
            inject2: Conv2d::new(t2, t2, 1, 1, 0, true, rng)?.zero_init()?,
        })
    }

    /// F_cond [N, C, h, w] with h, w divisible by 4 -> features at
    /// (h, w), (h/2, w/2) and (h/4, w/4).
    pub fn forward(&self, f_cond: &Tensor) -> Result<Vec<Tensor>> {
        let s = f_cond.shape();
        if s.len() != 4 || s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(CoreError::invalid(
                "sfadapter",
                format!("expected [N,C,h,w] with h,w divisible by 4, got {s:?}"),
            ));
        }
        let a0 = self.res0.forward(&self.stem.forward(f_cond)?, None)?;
        let a1 = self.res1.forward(&self.down1.forward(&a0)?.silu()?, None)?;
        let a2 = self.res2.forward(&self.down2.forward(&a1)?.silu()?, None)?;
        Ok(vec![
            self.inject0.forward(&a0)?,
            self.inject1.forward(&a1)?,
            self.inject2.forward(&a2)?,
        ])
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.stem.collect_params(&format!("{prefix}.stem"), out);
        self.res0.collect_params(&format!("{prefix}.res0"), out);
        self.down1.collect_params(&format!("{prefix}.down1"), out);
        self.res1.collect_params(&format!("{prefix}.res1"), out);
        self.down2.collect_params(&format!("{prefix}.down2"), out);
        self.res2.collect_params(&format!("{prefix}.res2"), out);
        self.inject0.collect_params(&format!("{prefix}.inject0"), out);
        self.inject1.collect_params(&format!("{prefix}.inject1"), out);
        self.inject2.collect_params(&format!("{prefix}.inject2"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::NoiseSource;
    use crate::tile::scale_prompt;

    fn zero_params(params: &[(String, Tensor)]) {
        for (_, p) in params {
            p.set_data(&vec![0.0; p.numel()]).unwrap();
        }
    }

    // ── Text embedding ──────────────────────────────────────────────

    #[test]
    fn prompts_embed_deterministically_with_unit_norm() {
        let enc = TextEncoder::new(256, 42).unwrap();
        let a = enc.encode(&scale_prompt(16).unwrap()).unwrap();
        let b = enc.encode(&scale_prompt(16).unwrap()).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        let norm: f64 = a.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn distinct_level_prompts_are_distinct() {
        let enc = TextEncoder::new(256, 42).unwrap();
        let a = enc.encode(&scale_prompt(14).unwrap()).unwrap().to_vec();
        let b = enc.encode(&scale_prompt(18).unwrap()).unwrap().to_vec();
        let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!(cos < 0.999, "cosine {cos}");
    }

    #[test]
    fn empty_prompt_is_a_contract_violation() {
        let enc = TextEncoder::new(64, 0).unwrap();
        assert!(enc.encode("").is_err());
        assert!(enc.encode("  ;:  ").is_err());
    }

    #[test]
    fn tokenization_splits_on_punctuation_and_case() {
        assert_eq!(tokenize("Level 16; scale 1:8000"), vec!["level", "16", "scale", "1", "8000"]);
    }

    // ── Time embedding ──────────────────────────────────────────────

    #[test]
    fn time_zero_alternates_zero_one() {
        let e = encode_time(0, 8).unwrap().to_vec();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn time_embeddings_bounded_and_distinct() {
        let mut seen = std::collections::HashSet::new();
        for t in 0..=200 {
            let e = encode_time(t, 32).unwrap().to_vec();
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
            let bits: Vec<u64> = e.iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(bits), "duplicate embedding at t={t}");
        }
        assert!(encode_time(1, 7).is_err());
    }

    #[test]
    fn combining_adds_elementwise() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        let b = Tensor::from_vec(vec![0.5, -1.0, 4.0], &[1, 3]).unwrap();
        assert_eq!(combine_embeddings(&a, &b).unwrap().to_vec(), vec![1.5, 1.0, 7.0]);
        assert_eq!(
            combine_embeddings(&a, &b).unwrap().to_vec(),
            combine_embeddings(&b, &a).unwrap().to_vec()
        );
        let zero = Tensor::zeros(&[1, 3]);
        assert_eq!(combine_embeddings(&a, &zero).unwrap().to_vec(), a.to_vec());
        let bad = Tensor::zeros(&[1, 4]);
        assert!(combine_embeddings(&a, &bad).is_err());
    }

    // ── Cascade fusion ──────────────────────────────────────────────

    #[test]
    fn fused_latent_has_summed_channels() {
        let fuser = CascadeFuser::new(8, 9).unwrap();
        let mut ns = NoiseSource::from_seed(1);
        let z = ns.standard_normal(&[1, 4, 8, 8]);
        let reference = ns.standard_normal(&[1, 3, 32, 32]);
        let fused = fuser.fuse(&z, &reference).unwrap();
        assert_eq!(fused.shape(), &[1, 12, 8, 8]);
    }

    #[test]
    fn zeroed_fuser_leaves_latent_untouched_and_block_zero() {
        let fuser = CascadeFuser::new(6, 3).unwrap();
        let mut params = Vec::new();
        fuser.collect_params("f", &mut params);
        zero_params(&params);
        let mut ns = NoiseSource::from_seed(2);
        let z = ns.standard_normal(&[2, 4, 8, 8]);
        let reference = ns.standard_normal(&[2, 3, 32, 32]);
        let fused = fuser.fuse(&z, &reference).unwrap().to_vec();
        let zv = z.to_vec();
        // Per sample: first 4 channel planes equal z, remaining 6 are zero.
        let plane = 64;
        for n in 0..2 {
            let base = n * 10 * plane;
            assert_eq!(&fused[base..base + 4 * plane], &zv[n * 4 * plane..(n + 1) * 4 * plane]);
            assert!(fused[base + 4 * plane..base + 10 * plane].iter().all(|v| *v == 0.0));
        }
    }

    // ── Spatially adaptive fusion ───────────────────────────────────

    #[test]
    fn zeroed_heads_reduce_to_plain_normalization() {
        let mut rng = stream_rng(7, "t");
        let block = SpadeBlock::new(4, 2, 6, &mut rng).unwrap();
        let mut params = Vec::new();
        block.gamma.collect_params("g", &mut params);
        block.beta.collect_params("b", &mut params);
        zero_params(&params);
        let mut ns = NoiseSource::from_seed(3);
        let x = ns.standard_normal(&[1, 4, 6, 6]);
        let ctx = ns.standard_normal(&[1, 2, 6, 6]);
        let got = block.forward(&x, &ctx).unwrap().to_vec();
        let want = x.instance_norm(1e-5).unwrap().to_vec();
        assert_eq!(got, want);
    }

    #[test]
    fn constant_input_yields_beta_only() {
        let mut rng = stream_rng(8, "t");
        let block = SpadeBlock::new(3, 2, 5, &mut rng).unwrap();
        let x = Tensor::full(&[1, 3, 5, 5], 0.7).unwrap();
        let mut ns = NoiseSource::from_seed(4);
        let ctx = ns.standard_normal(&[1, 2, 5, 5]);
        let got = block.forward(&x, &ctx).unwrap();
        let ctx_hat = Tensor::concat(&[ctx.clone(), x.clone()], 1).unwrap();
        let h = block.trunk.forward(&ctx_hat).unwrap().silu().unwrap();
        let beta = block.beta.forward(&h).unwrap();
        for (g, b) in got.to_vec().iter().zip(beta.to_vec()) {
            assert!((g - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_extents_rejected() {
        let mut rng = stream_rng(9, "t");
        let block = SpadeBlock::new(3, 2, 5, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 3, 6, 6]);
        let ctx = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(block.forward(&x, &ctx).is_err());
    }

    // ── Map feature encoder ─────────────────────────────────────────

    #[test]
    fn output_lands_at_latent_extents() {
        let mut rng = stream_rng(10, "t");
        // factor 8: three scales plus one extra downsample.
        let enc = MFEncoder::new(6, 5, 8, &mut rng).unwrap();
        let mut ns = NoiseSource::from_seed(5);
        let rs = ns.standard_normal(&[1, 3, 32, 32]);
        let reference = ns.standard_normal(&[1, 3, 32, 32]);
        let f = enc.forward(&rs, &reference).unwrap();
        assert_eq!(f.shape(), &[1, 5, 4, 4]);

        // factor 4: exactly three scales, no extras.
        let enc4 = MFEncoder::new(6, 5, 4, &mut rng).unwrap();
        let f4 = enc4.forward(&rs, &reference).unwrap();
        assert_eq!(f4.shape(), &[1, 5, 8, 8]);
    }

    #[test]
    fn zeroed_reference_branch_ignores_the_reference() {
        let mut rng = stream_rng(11, "t");
        let enc = MFEncoder::new(4, 3, 4, &mut rng).unwrap();
        enc.zero_reference_branch();
        let mut ns = NoiseSource::from_seed(6);
        let rs = ns.standard_normal(&[1, 3, 16, 16]);
        let ref_a = ns.standard_normal(&[1, 3, 16, 16]);
        let ref_b = ns.standard_normal(&[1, 3, 16, 16]);
        let fa = enc.forward(&rs, &ref_a).unwrap().to_vec();
        let fb = enc.forward(&rs, &ref_b).unwrap().to_vec();
        assert_eq!(fa, fb);
    }

    #[test]
    fn branch_shapes_must_agree() {
        let mut rng = stream_rng(12, "t");
        let enc = MFEncoder::new(4, 3, 4, &mut rng).unwrap();
        let rs = Tensor::zeros(&[1, 3, 16, 16]);
        let reference = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(enc.forward(&rs, &reference).is_err());
        let odd = Tensor::zeros(&[1, 3, 18, 18]);
        assert!(enc.forward(&odd, &odd).is_err());
    }

    // ── Scale feature adapter ───────────────────────────────────────

    #[test]
    fn adapter_tiers_halve_extents_with_matching_channels() {
        let mut rng = stream_rng(13, "t");
        let adapter = SFAdapter::new(5, [8, 16, 32], &mut rng).unwrap();
        let mut ns = NoiseSource::from_seed(7);
        let f = ns.standard_normal(&[2, 5, 8, 8]);
        let feats = adapter.forward(&f).unwrap();
        assert_eq!(feats[0].shape(), &[2, 8, 8, 8]);
        assert_eq!(feats[1].shape(), &[2, 16, 4, 4]);
        assert_eq!(feats[2].shape(), &[2, 32, 2, 2]);
    }

    #[test]
    fn zero_input_with_default_biases_yields_zero_features() {
        // All biases initialize to zero, so a zero F_cond must produce
        // exactly zero features at every tier.
        let mut rng = stream_rng(14, "t");
        let adapter = SFAdapter::new(4, [8, 8, 8], &mut rng).unwrap();
        let f = Tensor::zeros(&[1, 4, 8, 8]);
        for feat in adapter.forward(&f).unwrap() {
            assert!(feat.to_vec().iter().all(|v| *v == 0.0));
        }
    }
}
