//! The conditional U-Net noise predictor and its training step.
//!
//! Three resolution tiers with channel multipliers, residual blocks carrying
//! an additive embedding projection, cross-attention over the combined
//! scale/time embedding at configurable tiers, a self-attention middle, and
//! skip connections concatenated into the decoder. Multi-scale condition
//! features are added element-wise at matching encoder and decoder tier
//! outputs; passing no features skips the additions entirely so the
//! unconditional path is exactly the conditional path with zero injections.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::condition::{combine_embeddings, encode_time, CascadeFuser, MFEncoder, SFAdapter, TextEncoder};
use crate::diffusion::{q_sample_batch, NoiseSchedule};
use crate::error::{CoreError, Result};
use crate::nn::{self, AdamW, Attention, Conv2d, GroupNorm, ResBlock, StateDict};
use crate::rng::{child_seed, stream_rng};
use crate::tensor::Tensor;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Channels of the clean latent (and of the predicted noise).
    pub latent_channels: usize,
    /// Feature channels concatenated by the cascade fuser.
    pub cascade_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: [usize; 3],
    pub blocks_per_tier: usize,
    /// Which tiers run cross-attention over the embedding token.
    pub attention_tiers: [bool; 3],
    pub attention_heads: usize,
    pub embedding_dim: usize,
}

impl DenoiserConfig {
    /// CPU-scale profile: 32 base channels, one block per tier, attention
    /// at the two lowest-resolution tiers.
    pub fn desk(latent_channels: usize, cascade_channels: usize) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels,
            cascade_channels,
            base_channels: 32,
            channel_multipliers: [1, 2, 4],
            blocks_per_tier: 1,
            attention_tiers: [false, true, true],
            attention_heads: 4,
            embedding_dim: 256,
        }
    }

    /// Training-scale profile. Valid and countable, far too heavy for the
    /// test environment.
    pub fn full(latent_channels: usize, cascade_channels: usize) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels,
            cascade_channels,
            base_channels: 256,
            channel_multipliers: [1, 2, 4],
            blocks_per_tier: 2,
            attention_tiers: [false, true, true],
            attention_heads: 8,
            embedding_dim: 768,
        }
    }

    pub fn tier_channels(&self) -> [usize; 3] {
        [
            self.base_channels * self.channel_multipliers[0],
            self.base_channels * self.channel_multipliers[1],
            self.base_channels * self.channel_multipliers[2],
        ]
    }

    pub fn in_channels(&self) -> usize {
        self.latent_channels + self.cascade_channels
    }

    fn validate(&self) -> Result<()> {
        if self.latent_channels == 0
            || self.base_channels == 0
            || self.blocks_per_tier == 0
            || self.attention_heads == 0
            || self.channel_multipliers.contains(&0)
        {
            return Err(CoreError::invalid("denoiser_config", "zero-sized dimension"));
        }
        if self.embedding_dim % 2 != 0 {
            return Err(CoreError::invalid("denoiser_config", "embedding dim must be even"));
        }
        let tiers = self.tier_channels();
        for (i, &c) in tiers.iter().enumerate() {
            let needs_attn = self.attention_tiers[i] || i == 2; // middle is always attentive
            if needs_attn && c % self.attention_heads != 0 {
                return Err(CoreError::invalid(
                    "denoiser_config",
                    format!("tier {i} channels {c} not divisible by {} heads", self.attention_heads),
                ));
            }
        }
        Ok(())
    }
}

// ── U-Net ───────────────────────────────────────────────────────────────

pub struct UNet {
    pub cfg: DenoiserConfig,
    stem: Conv2d,
    enc_t0: Vec<ResBlock>,
    enc_attn_t0: Option<Attention>,
    down0: Conv2d,
    enc_t1: Vec<ResBlock>,
    enc_attn_t1: Option<Attention>,
    down1: Conv2d,
    enc_t2: Vec<ResBlock>,
    enc_attn_t2: Option<Attention>,
    mid1: ResBlock,
    mid_attn: Attention,
    mid2: ResBlock,
    dec_t2: Vec<ResBlock>,
    dec_attn_t2: Option<Attention>,
    up1: Conv2d,
    dec_t1: Vec<ResBlock>,
    dec_attn_t1: Option<Attention>,
    up0: Conv2d,
    dec_t0: Vec<ResBlock>,
    dec_attn_t0: Option<Attention>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

fn tier_blocks(
    first_in: usize,
    ch: usize,
    count: usize,
    emb: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ResBlock>> {
    let mut blocks = Vec::with_capacity(count);
    for b in 0..count {
        let cin = if b == 0 { first_in } else { ch };
        blocks.push(ResBlock::new(cin, ch, Some(emb), rng)?);
    }
    Ok(blocks)
}

fn maybe_attn(
    on: bool,
    ch: usize,
    ctx: usize,
    heads: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Attention>> {
    if on {
        Ok(Some(Attention::new(ch, ctx, heads, rng)?))
    } else {
        Ok(None)
    }
}

impl UNet {
    pub fn new(cfg: DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<UNet> {
        cfg.validate()?;
        let [c0, c1, c2] = cfg.tier_channels();
        let (d, heads, blocks) = (cfg.embedding_dim, cfg.attention_heads, cfg.blocks_per_tier);
        Ok(UNet {
            stem: Conv2d::new(cfg.in_channels(), c0, 3, 1, 1, true, rng)?,
            enc_t0: tier_blocks(c0, c0, blocks, d, rng)?,
            enc_attn_t0: maybe_attn(cfg.attention_tiers[0], c0, d, heads, rng)?,
            down0: Conv2d::new(c0, c1, 3, 2, 1, true, rng)?,
            enc_t1: tier_blocks(c1, c1, blocks, d, rng)?,
            enc_attn_t1: maybe_attn(cfg.attention_tiers[1], c1, d, heads, rng)?,
            down1: Conv2d::new(c1, c2, 3, 2, 1, true, rng)?,
            enc_t2: tier_blocks(c2, c2, blocks, d, rng)?,
            enc_attn_t2: maybe_attn(cfg.attention_tiers[2], c2, d, heads, rng)?,
            mid1: ResBlock::new(c2, c2, Some(d), rng)?,
            mid_attn: Attention::new(c2, c2, heads, rng)?,
            mid2: ResBlock::new(c2, c2, Some(d), rng)?,
            dec_t2: tier_blocks(2 * c2, c2, blocks, d, rng)?,
            dec_attn_t2: maybe_attn(cfg.attention_tiers[2], c2, d, heads, rng)?,
            up1: Conv2d::new(c2, c1, 3, 1, 1, true, rng)?,
            dec_t1: tier_blocks(2 * c1, c1, blocks, d, rng)?,
            dec_attn_t1: maybe_attn(cfg.attention_tiers[1], c1, d, heads, rng)?,
            up0: Conv2d::new(c1, c0, 3, 1, 1, true, rng)?,
            dec_t0: tier_blocks(2 * c0, c0, blocks, d, rng)?,
            dec_attn_t0: maybe_attn(cfg.attention_tiers[0], c0, d, heads, rng)?,
            out_norm: GroupNorm::with_default_groups(c0)?,
            // a fresh denoiser predicts exactly zero; see Conv2d::zero_init
            out_conv: Conv2d::new(c0, cfg.latent_channels, 3, 1, 1, true, rng)?.zero_init()?,
            cfg,
        })
    }

    /// Exact trainable parameter count for a config, without building it.
    pub fn param_count(cfg: &DenoiserConfig) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let linear = |din: usize, dout: usize, bias: bool| dout * din + if bias { dout } else { 0 };
        let gn = |c: usize| 2 * c;
        let res = |cin: usize, cout: usize, d: usize| {
            gn(cin)
                + conv(cin, cout, 3)
                + linear(d, cout, true)
                + gn(cout)
                + conv(cout, cout, 3)
                + if cin != cout { conv(cin, cout, 1) } else { 0 }
        };
        let attn = |dq: usize, dctx: usize| {
            linear(dq, dq, false) + 2 * linear(dctx, dq, false) + linear(dq, dq, true)
        };
        let tier = |first_in: usize, ch: usize, blocks: usize, d: usize| {
            res(first_in, ch, d) + (blocks - 1) * res(ch, ch, d)
        };

        let [c0, c1, c2] = cfg.tier_channels();
        let (d, blocks) = (cfg.embedding_dim, cfg.blocks_per_tier);
        let mut n = conv(cfg.in_channels(), c0, 3);
        n += tier(c0, c0, blocks, d);
        n += conv(c0, c1, 3); // down0
        n += tier(c1, c1, blocks, d);
        n += conv(c1, c2, 3); // down1
        n += tier(c2, c2, blocks, d);
        n += 2 * res(c2, c2, d) + attn(c2, c2); // middle
        n += tier(2 * c2, c2, blocks, d);
        n += conv(c2, c1, 3); // up1
        n += tier(2 * c1, c1, blocks, d);
        n += conv(c1, c0, 3); // up0
        n += tier(2 * c0, c0, blocks, d);
        n += gn(c0) + conv(c0, cfg.latent_channels, 3); // out
        for (i, &c) in cfg.tier_channels().iter().enumerate() {
            if cfg.attention_tiers[i] {
                n += 2 * attn(c, d); // encoder and decoder instances
            }
        }
        n
    }

    fn run_blocks(blocks: &[ResBlock], mut h: Tensor, emb: &Tensor) -> Result<Tensor> {
        for b in blocks {
            h = b.forward(&h, Some(emb))?;
        }
        Ok(h)
    }

    /// Residual cross- or self-attention over flattened spatial tokens.
    fn run_attn(attn: &Attention, h: &Tensor, context: &Tensor) -> Result<Tensor> {
        let s = h.shape().to_vec();
        let (n, c, hh, ww) = (s[0], s[1], s[2], s[3]);
        let tokens = h.permute(&[0, 2, 3, 1])?.reshape(&[n, hh * ww, c])?;
        let attended = attn.forward(&tokens, context)?;
        let spatial = attended.reshape(&[n, hh, ww, c])?.permute(&[0, 3, 1, 2])?;
        h.add(&spatial)
    }

    fn inject(h: Tensor, sf: Option<&[Tensor]>, tier: usize) -> Result<Tensor> {
        match sf {
            None => Ok(h),
            Some(feats) => {
                let f = &feats[tier];
                if f.shape() != h.shape() {
                    return Err(CoreError::Contract(format!(
                        "condition feature at tier {tier} is {:?}, denoiser expects {:?}",
                        f.shape(),
                        h.shape()
                    )));
                }
                h.add(f)
            }
        }
    }

    /// Predict the noise component of a fused latent.
    ///
    /// `z_fused` is [N, latent+cascade, h, w] with h, w divisible by 4;
    /// `embedding` is [N, D]; `sf_features`, when given, holds three maps at
    /// (h, w), (h/2, w/2), (h/4, w/4) with tier channel counts. The output
    /// is [N, latent, h, w].
    pub fn predict_noise(
        &self,
        z_fused: &Tensor,
        embedding: &Tensor,
        sf_features: Option<&[Tensor]>,
    ) -> Result<Tensor> {
        let s = z_fused.shape();
        if s.len() != 4 || s[1] != self.cfg.in_channels() {
            return Err(CoreError::Contract(format!(
                "fused latent is {s:?}, denoiser expects [N,{},h,w]",
                self.cfg.in_channels()
            )));
        }
        if s[2] % 4 != 0 || s[3] % 4 != 0 || s[2] < 4 || s[3] < 4 {
            return Err(CoreError::Contract(format!(
                "latent extents {}x{} must be divisible by 4",
                s[2], s[3]
            )));
        }
        let es = embedding.shape();
        if es != [s[0], self.cfg.embedding_dim] {
            return Err(CoreError::Contract(format!(
                "embedding is {es:?}, denoiser expects [{}, {}]",
                s[0], self.cfg.embedding_dim
            )));
        }
        if let Some(feats) = sf_features {
            if feats.len() != 3 {
                return Err(CoreError::Contract(format!(
                    "{} condition features for 3 tiers",
                    feats.len()
                )));
            }
        }
        let ctx = embedding.reshape(&[s[0], 1, self.cfg.embedding_dim])?;

        let mut h = self.stem.forward(z_fused)?;
        h = Self::run_blocks(&self.enc_t0, h, embedding)?;
        if let Some(a) = &self.enc_attn_t0 {
            h = Self::run_attn(a, &h, &ctx)?;
        }
        h = Self::inject(h, sf_features, 0)?;
        let skip0 = h.clone();
        h = self.down0.forward(&h)?;

        h = Self::run_blocks(&self.enc_t1, h, embedding)?;
        if let Some(a) = &self.enc_attn_t1 {
            h = Self::run_attn(a, &h, &ctx)?;
        }
        h = Self::inject(h, sf_features, 1)?;
        let skip1 = h.clone();
        h = self.down1.forward(&h)?;

        h = Self::run_blocks(&self.enc_t2, h, embedding)?;
        if let Some(a) = &self.enc_attn_t2 {
            h = Self::run_attn(a, &h, &ctx)?;
        }
        h = Self::inject(h, sf_features, 2)?;
        let skip2 = h.clone();

        h = self.mid1.forward(&h, Some(embedding))?;
        {
            let s = h.shape().to_vec();
            let tokens = h.permute(&[0, 2, 3, 1])?.reshape(&[s[0], s[2] * s[3], s[1]])?;
            h = Self::run_attn(&self.mid_attn, &h, &tokens)?;
        }
        h = self.mid2.forward(&h, Some(embedding))?;

        h = Tensor::concat(&[h, skip2], 1)?;
        h = Self::run_blocks(&self.dec_t2, h, embedding)?;
        if let Some(a) = &self.dec_attn_t2 {
            h = Self::run_attn(a, &h, &ctx)?;
        }
        h = Self::inject(h, sf_features, 2)?;

        h = self.up1.forward(&h.upsample_nearest(2)?)?;
        h = Tensor::concat(&[h, skip1], 1)?;
        h = Self::run_blocks(&self.dec_t1, h, embedding)?;
        if let Some(a) = &self.dec_attn_t1 {
            h = Self::run_attn(a, &h, &ctx)?;
        }
        h = Self::inject(h, sf_features, 1)?;

        h = self.up0.forward(&h.upsample_nearest(2)?)?;
        h = Tensor::concat(&[h, skip0], 1)?;
        h = Self::run_blocks(&self.dec_t0, h, embedding)?;
        if let Some(a) = &self.dec_attn_t0 {
            h = Self::run_attn(a, &h, &ctx)?;
        }
        h = Self::inject(h, sf_features, 0)?;

        self.out_conv.forward(&self.out_norm.forward(&h)?.silu()?)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.stem.collect_params(&format!("{prefix}.stem"), out);
        let tiers: [(&str, &Vec<ResBlock>, &Option<Attention>); 6] = [
            ("enc_t0", &self.enc_t0, &self.enc_attn_t0),
            ("enc_t1", &self.enc_t1, &self.enc_attn_t1),
            ("enc_t2", &self.enc_t2, &self.enc_attn_t2),
            ("dec_t2", &self.dec_t2, &self.dec_attn_t2),
            ("dec_t1", &self.dec_t1, &self.dec_attn_t1),
            ("dec_t0", &self.dec_t0, &self.dec_attn_t0),
        ];
        for (name, blocks, attn) in tiers {
            for (i, b) in blocks.iter().enumerate() {
                b.collect_params(&format!("{prefix}.{name}.block{i}"), out);
            }
            if let Some(a) = attn {
                a.collect_params(&format!("{prefix}.{name}.attn"), out);
            }
        }
        self.down0.collect_params(&format!("{prefix}.down0"), out);
        self.down1.collect_params(&format!("{prefix}.down1"), out);
        self.mid1.collect_params(&format!("{prefix}.mid.block0"), out);
        self.mid_attn.collect_params(&format!("{prefix}.mid.attn"), out);
        self.mid2.collect_params(&format!("{prefix}.mid.block1"), out);
        self.up1.collect_params(&format!("{prefix}.up1"), out);
        self.up0.collect_params(&format!("{prefix}.up0"), out);
        self.out_norm.collect_params(&format!("{prefix}.out_norm"), out);
        self.out_conv.collect_params(&format!("{prefix}.out_conv"), out);
    }
}

// ── Bundled conditional model ───────────────────────────────────────────

/// Widths of the condition encoders plus the U-Net config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub latent_factor: usize,
    pub mf_width: usize,
    pub cond_channels: usize,
}

impl ModelConfig {
    /// CPU-scale profile for a given latent factor; latent channels follow
    /// the exact codec (3 f^2).
    pub fn desk(latent_factor: usize) -> ModelConfig {
        ModelConfig {
            denoiser: DenoiserConfig::desk(3 * latent_factor * latent_factor, 8),
            latent_factor,
            mf_width: 8,
            cond_channels: 8,
        }
    }

    /// Training-scale profile (factor 8, wide tiers). Countable, not run.
    pub fn full() -> ModelConfig {
        ModelConfig {
            denoiser: DenoiserConfig::full(192, 16),
            latent_factor: 8,
            mf_width: 64,
            cond_channels: 64,
        }
    }
}

/// Which parameters a training run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Everything: U-Net and all condition encoders.
    All,
    /// Condition encoders plus the U-Net's linear layers (attention
    /// projections and embedding projections); convolutional trunk frozen.
    AdaptersOnly,
}

pub struct ConditionalDenoiser {
    pub cfg: ModelConfig,
    pub unet: UNet,
    pub fuser: CascadeFuser,
    pub mf: MFEncoder,
    pub adapter: SFAdapter,
    pub text: TextEncoder,
}

impl ConditionalDenoiser {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<ConditionalDenoiser> {
        let unet = UNet::new(cfg.denoiser.clone(), &mut stream_rng(seed, "unet"))?;
        let fuser = CascadeFuser::new(cfg.denoiser.cascade_channels, child_seed(seed, "fuser"))?;
        let mf = MFEncoder::new(
            cfg.mf_width,
            cfg.cond_channels,
            cfg.latent_factor,
            &mut stream_rng(seed, "mf"),
        )?;
        let adapter = SFAdapter::new(
            cfg.cond_channels,
            cfg.denoiser.tier_channels(),
            &mut stream_rng(seed, "adapter"),
        )?;
        let text = TextEncoder::new(cfg.denoiser.embedding_dim, child_seed(seed, "text"))?;
        Ok(ConditionalDenoiser {
            cfg,
            unet,
            fuser,
            mf,
            adapter,
            text,
        })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.unet.collect_params("unet", &mut out);
        self.fuser.collect_params("fuser", &mut out);
        self.mf.collect_params("mf", &mut out);
        self.adapter.collect_params("adapter", &mut out);
        out
    }

    pub fn trainable_params(&self, scope: TrainScope) -> Vec<(String, Tensor)> {
        match scope {
            TrainScope::All => self.params(),
            TrainScope::AdaptersOnly => self
                .params()
                .into_iter()
                .filter(|(name, _)| {
                    !name.starts_with("unet")
                        || name.contains(".attn.")
                        || name.contains(".emb_proj.")
                })
                .collect(),
        }
    }

    pub fn state_dict(&self) -> StateDict {
        nn::state_dict(&self.params())
    }

    pub fn load_state_dict(&self, dict: &StateDict) -> Result<()> {
        nn::load_state_dict(&self.params(), dict)
    }

    /// Per-sample combined scale + time embeddings stacked to [N, D].
    pub fn embed(&self, prompts: &[String], ts: &[usize]) -> Result<Tensor> {
        if prompts.len() != ts.len() || prompts.is_empty() {
            return Err(CoreError::invalid(
                "embed",
                format!("{} prompts for {} timesteps", prompts.len(), ts.len()),
            ));
        }
        let d = self.cfg.denoiser.embedding_dim;
        let mut rows = Vec::with_capacity(prompts.len());
        for (p, &t) in prompts.iter().zip(ts) {
            rows.push(combine_embeddings(&self.text.encode(p)?, &encode_time(t, d)?)?);
        }
        Tensor::concat(&rows, 0)
    }

    /// Full conditional noise prediction for a batch sharing shapes:
    /// z_t [N,L,h,w], rs and refs [N,3,H,W], one prompt and timestep per item.
    pub fn predict(
        &self,
        z_t: &Tensor,
        ts: &[usize],
        prompts: &[String],
        rs: &Tensor,
        refs: &Tensor,
    ) -> Result<Tensor> {
        let emb = self.embed(prompts, ts)?;
        let fused = self.fuser.fuse(z_t, refs)?;
        let f_cond = self.mf.forward(rs, refs)?;
        let sf = self.adapter.forward(&f_cond)?;
        self.unet.predict_noise(&fused, &emb, Some(&sf))
    }
}

// ── Training ────────────────────────────────────────────────────────────

/// One batch of aligned training data. Latents are pre-encoded clean
/// targets; rs and refs are pixel-space conditions.
pub struct TrainBatch {
    pub latents: Tensor,
    pub rs: Tensor,
    pub refs: Tensor,
    pub prompts: Vec<String>,
}

impl TrainBatch {
    fn validate(&self) -> Result<usize> {
        let n = self.latents.shape()[0];
        if self.rs.shape()[0] != n || self.refs.shape()[0] != n || self.prompts.len() != n {
            return Err(CoreError::invalid(
                "train_batch",
                format!(
                    "misaligned batch: {n} latents, {} rs, {} refs, {} prompts",
                    self.rs.shape()[0],
                    self.refs.shape()[0],
                    self.prompts.len()
                ),
            ));
        }
        Ok(n)
    }
}

/// Timesteps for one batch: [1, t_max] is cut into one stratum per item and
/// each stratum contributes one uniform draw, then the assignment to items
/// is shuffled. Every slot is still marginally uniform over the range; only
/// the between-batch composition variance drops, which matters because the
/// low-t strata contribute most of the gradient noise.
fn stratified_timesteps(n: usize, t_max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut ts: Vec<usize> = (0..n)
        .map(|i| {
            let u: f64 = rand::Rng::random(rng);
            let pos = (i as f64 + u) / n as f64;
            1 + ((pos * t_max as f64) as usize).min(t_max - 1)
        })
        .collect();
    ts.shuffle(rng);
    ts
}

/// One optimization step: per-item stratified timestep and fresh noise,
/// forward noising, full conditioning, noise prediction, MSE, backward and
/// a decoupled-weight-decay adaptive update. Returns the scalar loss.
pub fn train_step(
    model: &ConditionalDenoiser,
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    opt: &mut AdamW,
    scope: TrainScope,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = batch.validate()?;
    let t_max = schedule.steps();
    let ts = stratified_timesteps(n, t_max, rng);
    let numel = batch.latents.numel();
    let eps_data: Vec<f64> = (0..numel).map(|_| StandardNormal.sample(rng)).collect();
    let eps = Tensor::from_vec(eps_data, batch.latents.shape())?;

    let z_t = q_sample_batch(&batch.latents, &ts, schedule, &eps)?;
    let eps_hat = model.predict(&z_t, &ts, &batch.prompts, &batch.rs, &batch.refs)?;
    let loss = eps_hat.mse(&eps)?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(CoreError::NonFinite { op: "train_step" });
    }

    let params = model.trainable_params(scope);
    opt.zero_grad(&params);
    loss.backward()?;
    opt.step(&params)?;
    Ok(value)
}

/// Append-only training log line: step, loss, lr, wall-clock seconds.
pub fn format_log_line(step: usize, loss: f64, lr: f64, elapsed_secs: f64) -> String {
    format!("{step}\t{loss:.6}\t{lr:e}\t{elapsed_secs:.3}")
}
