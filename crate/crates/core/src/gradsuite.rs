//! Named finite-difference verification of every trainable layer.
//!
//! [`crate::tensor::grad_check`] differentiates with respect to explicit
//! leaf tensors; the layer types own their parameters, so this module adds a
//! runner that treats the parameters themselves as the leaves: it randomizes
//! them (residual branches ship zero-initialized, which would otherwise
//! leave upstream gradients identically zero and make a check vacuous),
//! evaluates the analytic gradient once, then probes a seeded subsample of
//! coordinates with central differences. The readout is a fixed random
//! weighting of the output so distinct coordinates get distinct gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::condition::{MFEncoder, SFAdapter, SpadeBlock};
use crate::denoiser::{ConditionalDenoiser, DenoiserConfig, ModelConfig};
use crate::error::{CoreError, Result};
use crate::nn::{Attention, Conv2d, GroupNorm, Linear, ResBlock};
use crate::rng::{rng_from_seed, stream_rng};
use crate::tensor::Tensor;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct LayerGradCheck {
    pub name: &'static str,
    pub max_rel: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl LayerGradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel < self.tolerance
    }
}

/// Overwrites every parameter with uniform values in `(-scale, scale)`.
pub fn randomize_params(
    params: &[(String, Tensor)],
    rng: &mut ChaCha8Rng,
    scale: f64,
) -> Result<()> {
    for (_, p) in params {
        let data: Vec<f64> = (0..p.numel()).map(|_| rng.random_range(-scale..scale)).collect();
        p.set_data(&data)?;
    }
    Ok(())
}

/// Central-difference check of `forward` with respect to `params`. Probes at
/// most `budget` coordinates, sampled without replacement across the whole
/// parameter set, and returns the worst relative error seen.
pub fn params_grad_check<F>(
    params: &[(String, Tensor)],
    forward: F,
    budget: usize,
    seed: u64,
) -> Result<(f64, usize)>
where
    F: Fn() -> Result<Tensor>,
{
    // Chosen against f64 roundoff: central differences lose ~eps/STEP
    // absolute accuracy through the deep reductions (norms, softmax), so
    // smaller steps get noisier, not sharper, well before truncation bites.
    const STEP: f64 = 1e-4;
    const DENOM_FLOOR: f64 = 1e-6;
    if params.is_empty() {
        return Err(CoreError::invalid("params_grad_check", "no parameters"));
    }

    for (_, p) in params {
        p.zero_grad();
    }
    let analytic: Vec<Vec<f64>> = {
        let loss = forward()?;
        if loss.numel() != 1 {
            return Err(CoreError::invalid("params_grad_check", "objective must be scalar"));
        }
        loss.backward()?;
        params
            .iter()
            .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect()
    };

    // Map a flat index space over the concatenated parameters so the budget
    // is global: large layers get proportionally more probes.
    let sizes: Vec<usize> = params.iter().map(|(_, p)| p.numel()).collect();
    let total: usize = sizes.iter().sum();
    let picks = budget.min(total);
    let mut chosen: Vec<usize> =
        rand::seq::index::sample(&mut rng_from_seed(seed), total, picks).into_vec();
    chosen.sort_unstable();

    let mut max_rel = 0.0f64;
    let mut cursor = 0usize;
    let mut offset = 0usize;
    for (k, (_, p)) in params.iter().enumerate() {
        let end = offset + sizes[k];
        let base = p.to_vec();
        while cursor < chosen.len() && chosen[cursor] < end {
            let i = chosen[cursor] - offset;
            cursor += 1;
            let mut probe = base.clone();
            probe[i] = base[i] + STEP;
            p.set_data(&probe)?;
            let plus = forward()?.item()?;
            probe[i] = base[i] - STEP;
            p.set_data(&probe)?;
            let minus = forward()?.item()?;
            let fd = (plus - minus) / (2.0 * STEP);
            let ad = analytic[k][i];
            let denom = ad.abs().max(fd.abs()).max(DENOM_FLOOR);
            max_rel = max_rel.max((ad - fd).abs() / denom);
        }
        p.set_data(&base)?;
        offset = end;
    }
    Ok((max_rel, picks))
}

const LAYER_TOLERANCE: f64 = 1e-4;
const COMPOSITE_TOLERANCE: f64 = 1e-3;
const LAYER_BUDGET: usize = 160;
const COMPOSITE_BUDGET: usize = 120;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(data, shape)
}

/// Fixed random readout so the scalar objective weights every output
/// coordinate differently.
fn readout(out: &Tensor, w: &Tensor) -> Result<Tensor> {
    out.mul(w)?.sum_all()
}

fn check_case<F>(
    name: &'static str,
    params: Vec<(String, Tensor)>,
    forward: F,
    budget: usize,
    tolerance: f64,
    seed: u64,
) -> Result<LayerGradCheck>
where
    F: Fn() -> Result<Tensor>,
{
    let (max_rel, coords_checked) = params_grad_check(&params, forward, budget, seed)?;
    Ok(LayerGradCheck { name, max_rel, coords_checked, tolerance })
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        denoiser: DenoiserConfig {
            latent_channels: 4,
            cascade_channels: 2,
            base_channels: 8,
            channel_multipliers: [1, 2, 4],
            blocks_per_tier: 1,
            attention_tiers: [false, true, true],
            attention_heads: 2,
            embedding_dim: 16,
        },
        latent_factor: 2,
        mf_width: 4,
        cond_channels: 4,
    }
}

/// Runs the whole table: one finite-difference check per trainable layer
/// type, plus the composite denoiser on an 8x8 latent block.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<LayerGradCheck>> {
    let mut rows = Vec::new();

    {
        let mut rng = stream_rng(seed, "grad-conv");
        let layer = Conv2d::new(3, 4, 3, 1, 1, true, &mut rng)?;
        let mut params = Vec::new();
        layer.collect_params("conv", &mut params);
        params.push(("input".into(), Tensor::param(random_tensor(&mut rng, &[2, 3, 6, 6], 0.8)?.to_vec(), &[2, 3, 6, 6])?));
        randomize_params(&params, &mut rng, 0.5)?;
        let w = random_tensor(&mut rng, &[2, 4, 6, 6], 1.0)?;
        let x = params.last().expect("input leaf").1.clone();
        rows.push(check_case(
            "conv2d",
            params,
            move || readout(&layer.forward(&x)?, &w),
            LAYER_BUDGET,
            LAYER_TOLERANCE,
            seed ^ 0x11,
        )?);
    }

    {
        let mut rng = stream_rng(seed, "grad-linear");
        let layer = Linear::new(6, 5, true, &mut rng)?;
        let mut params = Vec::new();
        layer.collect_params("linear", &mut params);
        params.push(("input".into(), Tensor::param(random_tensor(&mut rng, &[3, 6], 0.8)?.to_vec(), &[3, 6])?));
        randomize_params(&params, &mut rng, 0.5)?;
        let w = random_tensor(&mut rng, &[3, 5], 1.0)?;
        let x = params.last().expect("input leaf").1.clone();
        rows.push(check_case(
            "linear",
            params,
            move || readout(&layer.forward(&x)?, &w),
            LAYER_BUDGET,
            LAYER_TOLERANCE,
            seed ^ 0x12,
        )?);
    }

    {
        let mut rng = stream_rng(seed, "grad-norm");
        let layer = GroupNorm::new(8, 4)?;
        let mut params = Vec::new();
        layer.collect_params("norm", &mut params);
        params.push(("input".into(), Tensor::param(random_tensor(&mut rng, &[2, 8, 4, 4], 0.8)?.to_vec(), &[2, 8, 4, 4])?));
        randomize_params(&params, &mut rng, 0.5)?;
        let w = random_tensor(&mut rng, &[2, 8, 4, 4], 1.0)?;
        let x = params.last().expect("input leaf").1.clone();
        rows.push(check_case(
            "group-norm",
            params,
            move || readout(&layer.forward(&x)?, &w),
            LAYER_BUDGET,
            LAYER_TOLERANCE,
            seed ^ 0x13,
        )?);
    }

    {
        let mut rng = stream_rng(seed, "grad-attn");
        let layer = Attention::new(16, 12, 2, &mut rng)?;
        let mut params = Vec::new();
        layer.collect_params("attn", &mut params);
        params.push(("query".into(), Tensor::param(random_tensor(&mut rng, &[2, 5, 16], 0.8)?.to_vec(), &[2, 5, 16])?));
        params.push(("context".into(), Tensor::param(random_tensor(&mut rng, &[2, 3, 12], 0.8)?.to_vec(), &[2, 3, 12])?));
        randomize_params(&params, &mut rng, 0.5)?;
        let w = random_tensor(&mut rng, &[2, 5, 16], 1.0)?;
        let ctx = params.pop().expect("context leaf").1;
        let q = params.last().expect("query leaf").1.clone();
        params.push(("context".into(), ctx.clone()));
        rows.push(check_case(
            "attention",
            params,
            move || readout(&layer.forward(&q, &ctx)?, &w),
            LAYER_BUDGET,
            LAYER_TOLERANCE,
            seed ^ 0x14,
        )?);
    }

    {
        let mut rng = stream_rng(seed, "grad-res");
        let layer = ResBlock::new(6, 8, Some(16), &mut rng)?;
        let mut params = Vec::new();
        layer.collect_params("res", &mut params);
        params.push(("input".into(), Tensor::param(random_tensor(&mut rng, &[2, 6, 4, 4], 0.8)?.to_vec(), &[2, 6, 4, 4])?));
        params.push(("emb".into(), Tensor::param(random_tensor(&mut rng, &[2, 16], 0.8)?.to_vec(), &[2, 16])?));
        randomize_params(&params, &mut rng, 0.4)?;
        let w = random_tensor(&mut rng, &[2, 8, 4, 4], 1.0)?;
        let emb = params.pop().expect("emb leaf").1;
        let x = params.last().expect("input leaf").1.clone();
        params.push(("emb".into(), emb.clone()));
        rows.push(check_case(
            "res-block",
            params,
            move || readout(&layer.forward(&x, Some(&emb))?, &w),
            LAYER_BUDGET,
            LAYER_TOLERANCE,
            seed ^ 0x15,
        )?);
    }

    {
        let mut rng = stream_rng(seed, "grad-spade");
        let layer = SpadeBlock::new(6, 4, 8, &mut rng)?;
        let mut params = Vec::new();
        layer.collect_params("spade", &mut params);
        params.push(("input".into(), Tensor::param(random_tensor(&mut rng, &[2, 6, 4, 4], 0.8)?.to_vec(), &[2, 6, 4, 4])?));
        params.push(("ctx".into(), Tensor::param(random_tensor(&mut rng, &[2, 4, 4, 4], 0.8)?.to_vec(), &[2, 4, 4, 4])?));
        randomize_params(&params, &mut rng, 0.4)?;
        let w = random_tensor(&mut rng, &[2, 6, 4, 4], 1.0)?;
        let ctx = params.pop().expect("ctx leaf").1;
        let x = params.last().expect("input leaf").1.clone();
        params.push(("ctx".into(), ctx.clone()));
        rows.push(check_case(
            "spade",
            params,
            move || readout(&layer.forward(&x, &ctx)?, &w),
            LAYER_BUDGET,
            LAYER_TOLERANCE,
            seed ^ 0x16,
        )?);
    }

    {
        let mut rng = stream_rng(seed, "grad-mf");
        let layer = MFEncoder::new(4, 4, 2, &mut rng)?;
        let mut params = Vec::new();
        layer.collect_params("mf", &mut params);
        params.push(("rs".into(), Tensor::param(random_tensor(&mut rng, &[1, 3, 8, 8], 0.8)?.to_vec(), &[1, 3, 8, 8])?));
        params.push(("ref".into(), Tensor::param(random_tensor(&mut rng, &[1, 3, 8, 8], 0.8)?.to_vec(), &[1, 3, 8, 8])?));
        randomize_params(&params, &mut rng, 0.4)?;
        let reference = params.pop().expect("ref leaf").1;
        let rs = params.last().expect("rs leaf").1.clone();
        params.push(("ref".into(), reference.clone()));
        let probe = layer.forward(&rs, &reference)?;
        let w = random_tensor(&mut rng, probe.shape(), 1.0)?;
        rows.push(check_case(
            "mf-encoder",
            params,
            move || readout(&layer.forward(&rs, &reference)?, &w),
            LAYER_BUDGET,
            LAYER_TOLERANCE,
            seed ^ 0x17,
        )?);
    }

    {
        let mut rng = stream_rng(seed, "grad-sf");
        let layer = SFAdapter::new(4, [8, 16, 32], &mut rng)?;
        let mut params = Vec::new();
        layer.collect_params("sf", &mut params);
        params.push(("cond".into(), Tensor::param(random_tensor(&mut rng, &[1, 4, 8, 8], 0.8)?.to_vec(), &[1, 4, 8, 8])?));
        randomize_params(&params, &mut rng, 0.4)?;
        let cond = params.last().expect("cond leaf").1.clone();
        let probes = layer.forward(&cond)?;
        let ws: Vec<Tensor> = probes
            .iter()
            .map(|p| random_tensor(&mut rng, p.shape(), 1.0))
            .collect::<Result<_>>()?;
        rows.push(check_case(
            "sf-adapter",
            params,
            move || {
                let tiers = layer.forward(&cond)?;
                let mut acc = readout(&tiers[0], &ws[0])?;
                for (t, w) in tiers.iter().zip(&ws).skip(1) {
                    acc = acc.add(&readout(t, w)?)?;
                }
                Ok(acc)
            },
            LAYER_BUDGET,
            LAYER_TOLERANCE,
            seed ^ 0x18,
        )?);
    }

    {
        let mut rng = stream_rng(seed, "grad-denoiser");
        let model = ConditionalDenoiser::new(toy_model_config(), seed ^ 0x99)?;
        let mut params = model.params();
        params.push(("z_t".into(), Tensor::param(random_tensor(&mut rng, &[1, 4, 8, 8], 0.8)?.to_vec(), &[1, 4, 8, 8])?));
        randomize_params(&params, &mut rng, 0.3)?;
        let z_t = params.last().expect("z_t leaf").1.clone();
        let rs = random_tensor(&mut rng, &[1, 3, 16, 16], 0.8)?;
        let refs = random_tensor(&mut rng, &[1, 3, 16, 16], 0.8)?;
        let w = random_tensor(&mut rng, &[1, 4, 8, 8], 1.0)?;
        let prompts = vec!["level 15 map tile".to_string()];
        rows.push(check_case(
            "denoiser-8x8",
            params,
            move || readout(&model.predict(&z_t, &[17], &prompts, &rs, &refs)?, &w),
            COMPOSITE_BUDGET,
            COMPOSITE_TOLERANCE,
            seed ^ 0x19,
        )?);
    }

    Ok(rows)
}

/// Plain-text table, one row per check.
pub fn format_gradient_table(rows: &[LayerGradCheck]) -> String {
    let mut out = String::from("layer         coords  max-rel    tolerance  status\n");
    for r in rows {
        out.push_str(&format!(
            "{:<13} {:>6}  {:<9.3e}  {:<9.1e}  {}\n",
            r.name,
            r.coords_checked,
            r.max_rel,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    out
}

/// True when every row is within tolerance.
pub fn all_within_tolerance(rows: &[LayerGradCheck]) -> bool {
    rows.iter().all(LayerGradCheck::passed)
}

#[cfg(test)]
mod tests {
    use super::*;

    // ── Runner mechanics ────────────────────────────────────────────

    #[test]
    fn global_budget_is_split_across_parameters() {
        let a = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let b = Tensor::param(vec![0.5, -0.5], &[2]).unwrap();
        let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let (max_rel, checked) =
            params_grad_check(&params, || a.mul(&a)?.sum_all()?.add(&b.sum_all()?), 10, 3).unwrap();
        assert_eq!(checked, 5);
        assert!(max_rel < 1e-6, "simple polynomial should match closely: {max_rel}");
    }

    #[test]
    fn randomize_overwrites_zero_initialized_parameters() {
        let p = Tensor::param(vec![0.0; 8], &[8]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        randomize_params(&params, &mut stream_rng(1, "rz"), 0.5).unwrap();
        assert!(p.to_vec().iter().any(|v| *v != 0.0));
        assert!(p.to_vec().iter().all(|v| v.abs() < 0.5));
    }

    // ── The suite itself ────────────────────────────────────────────

    #[test]
    fn suite_covers_the_contracted_layers_and_passes() {
        let rows = run_gradient_suite(0xF00D).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.name).collect();
        for expected in
            ["conv2d", "group-norm", "attention", "spade", "mf-encoder", "sf-adapter", "denoiser-8x8"]
        {
            assert!(names.contains(&expected), "missing {expected} in {names:?}");
        }
        assert!(all_within_tolerance(&rows), "{}", format_gradient_table(&rows));
    }

    #[test]
    fn table_has_one_line_per_row_plus_header() {
        let rows = vec![LayerGradCheck {
            name: "conv2d",
            max_rel: 3.2e-10,
            coords_checked: 160,
            tolerance: 1e-4,
        }];
        let table = format_gradient_table(&rows);
        assert_eq!(table.lines().count(), 2);
        assert!(table.contains("conv2d"));
        assert!(table.trim_end().ends_with("ok"));
    }
}
