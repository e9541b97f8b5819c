//! Built-in self-check suite: a headless battery of fast invariant checks
//! spanning every module, runnable from the command line as a CI gate.
//! Each check is independent; all of them run even if earlier ones fail.

use std::collections::BTreeMap;

use crate::cascade::{run_cascade, seam_score, stitch, CascadeJob, MockFactory, Sampler};
use crate::codec::{Codec, ExactCodec};
use crate::condition::{encode_time, TextEncoder};
use crate::dataset::{quadrant_path, split_regions, Split};
use crate::diffusion::{ddim_step, ddim_timesteps, ddpm_step, q_sample, NoiseSchedule, NoiseSource};
use crate::error::{CoreError, Result};
use crate::image::ImageBuf;
use crate::metrics::{fid_lite, frechet_distance, psnr, ssim, to_luma, GaussianStats};
use crate::rng::rng_from_seed;
use crate::tensor::{require_grad_check, GradCheckConfig};
use crate::tensor::Tensor;
use crate::tile::{StagePlan, TileCoord};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

struct Suite {
    seed: u64,
    results: Vec<CheckResult>,
}

impl Suite {
    fn run(&mut self, name: &'static str, f: impl FnOnce(u64) -> Result<String>) {
        let outcome = f(self.seed);
        self.results.push(match outcome {
            Ok(detail) => CheckResult { name, passed: true, detail },
            Err(e) => CheckResult { name, passed: false, detail: e.to_string() },
        });
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(CoreError::Contract(msg.into()))
    }
}

fn ramp_tile(px: usize) -> ImageBuf {
    let mut img = ImageBuf::new(px, px).expect("positive extent");
    for y in 0..px {
        for x in 0..px {
            let v = (x as f64 + y as f64) / (2.0 * px as f64 - 2.0) * 1.7 - 0.85;
            img.set_pixel(x, y, [v, v * 0.5, v * 0.25 + 0.1]);
        }
    }
    img
}

/// Run the whole suite. Every check executes; the Vec reports each one.
pub fn run_selftest(seed: u64) -> Vec<CheckResult> {
    let mut suite = Suite { seed, results: Vec::new() };

    suite.run("schedule-endpoints", |_| {
        let s = NoiseSchedule::desk();
        ensure((s.beta(1) - 2e-3).abs() < 1e-15, "first beta off")?;
        ensure((s.beta(50) - 0.4).abs() < 1e-15, "last beta off")?;
        let desk_terminal = s.alpha_bar(50);
        ensure(desk_terminal < 1e-4, format!("desk terminal alpha_bar {desk_terminal:.3e}"))?;
        let full = NoiseSchedule::full();
        let terminal = full.alpha_bar(1000);
        ensure((1e-5..1e-4).contains(&terminal), format!("terminal alpha_bar {terminal:.3e}"))?;
        Ok(format!("terminal alpha_bar {terminal:.3e}"))
    });

    suite.run("forward-noising-closed-form", |seed| {
        let s = NoiseSchedule::desk();
        let mut src = NoiseSource::from_seed(seed ^ 0xA1);
        let y0 = src.standard_normal(&[2, 3, 4, 4]);
        let eps = src.standard_normal(&[2, 3, 4, 4]);
        let t = 17;
        let ab = s.alpha_bar(t);
        let got = q_sample(&y0, t, &s, &eps)?;
        let want: Vec<f64> = y0
            .to_vec()
            .iter()
            .zip(eps.to_vec())
            .map(|(a, e)| ab.sqrt() * a + (1.0 - ab).sqrt() * e)
            .collect();
        let max = got
            .to_vec()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        ensure(max < 1e-12, format!("max deviation {max:.2e}"))?;
        Ok(format!("max deviation {max:.2e}"))
    });

    suite.run("ddim-true-noise-inversion", |seed| {
        let s = NoiseSchedule::desk();
        let mut src = NoiseSource::from_seed(seed ^ 0xB2);
        let y0 = src.standard_normal(&[1, 4, 3, 3]);
        let eps = src.standard_normal(&[1, 4, 3, 3]);
        let ts = ddim_timesteps(&s, 7)?;
        let mut y = q_sample(&y0, ts[0], &s, &eps)?;
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
            y = ddim_step(&y, &eps, t, t_prev, &s)?;
        }
        let max = y
            .to_vec()
            .iter()
            .zip(y0.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        ensure(max < 1e-9, format!("recovery error {max:.2e}"))?;
        Ok(format!("recovery error {max:.2e}"))
    });

    suite.run("ddpm-noise-contract", |seed| {
        let s = NoiseSchedule::desk();
        let mut src = NoiseSource::from_seed(seed ^ 0xC3);
        let y = src.standard_normal(&[1, 2, 2, 2]);
        let eps = src.standard_normal(&[1, 2, 2, 2]);
        let z = src.standard_normal(&[1, 2, 2, 2]);
        ensure(ddpm_step(&y, &eps, 1, &s, Some(&z)).is_err(), "noise at t=1 must be rejected")?;
        ensure(ddpm_step(&y, &eps, 5, &s, None).is_err(), "missing noise at t>1 must be rejected")?;
        ensure(ddpm_step(&y, &eps, 1, &s, None).is_ok(), "final step must succeed")?;
        Ok("final-step noise rules hold".into())
    });

    suite.run("latent-codec-isometry", |seed| {
        let codec = ExactCodec::new(4, seed ^ 0xD4)?;
        let mut src = NoiseSource::from_seed(seed ^ 0xD5);
        let x = src.standard_normal(&[2, 3, 16, 16]);
        let z = codec.encode(&x)?;
        ensure(z.shape() == [2, 48, 4, 4], format!("latent shape {:?}", z.shape()))?;
        let back = codec.decode(&z)?;
        let err = x
            .to_vec()
            .iter()
            .zip(back.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let norm_in: f64 = x.to_vec().iter().map(|v| v * v).sum();
        let norm_lat: f64 = z.to_vec().iter().map(|v| v * v).sum();
        ensure(err < 1e-9, format!("round-trip error {err:.2e}"))?;
        let rel = (norm_in - norm_lat).abs() / norm_in;
        ensure(rel < 1e-10, format!("norm drift {rel:.2e}"))?;
        Ok(format!("round-trip {err:.2e}, norm drift {rel:.2e}"))
    });

    suite.run("text-and-time-embeddings", |seed| {
        let enc = TextEncoder::new(64, seed ^ 0xE6)?;
        let a = enc.encode("level 14; scale 1:35000")?;
        let b = enc.encode("level 14; scale 1:35000")?;
        ensure(a.to_vec() == b.to_vec(), "text embedding not deterministic")?;
        let norm: f64 = a.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
        ensure((norm - 1.0).abs() < 1e-9, format!("norm {norm}"))?;
        ensure(enc.encode("").is_err(), "empty prompt must be rejected")?;
        let t0 = encode_time(0, 8)?.to_vec();
        ensure(
            t0 == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
            format!("t=0 embedding {t0:?}"),
        )?;
        Ok("deterministic, unit-norm, t=0 pattern".into())
    });

    suite.run("zero-injection-neutrality", |seed| {
        // Injecting all-zero multi-scale features must match skipping the
        // injection entirely, so zero-initialized adapters start inert.
        let cfg = crate::denoiser::DenoiserConfig::desk(48, 8);
        let mut rng = rng_from_seed(seed ^ 0xF7);
        let unet = crate::denoiser::UNet::new(cfg.clone(), &mut rng)?;
        let mut src = NoiseSource::from_seed(seed ^ 0xF8);
        let fused = src.standard_normal(&[1, cfg.in_channels(), 8, 8]);
        let emb = src.standard_normal(&[1, cfg.embedding_dim]);
        let tiers = cfg.tier_channels();
        let zeros: Vec<Tensor> = (0..3)
            .map(|i| Tensor::zeros(&[1, tiers[i], 8 >> i, 8 >> i]))
            .collect();
        let without = unet.predict_noise(&fused, &emb, None)?;
        let with_zeros = unet.predict_noise(&fused, &emb, Some(&zeros))?;
        ensure(
            without.to_vec() == with_zeros.to_vec(),
            "zero features changed the prediction",
        )?;
        Ok("zero features match skipped injection bit-for-bit".into())
    });

    suite.run("gradient-spot-check", |seed| {
        let mut rng = rng_from_seed(seed ^ 0x19);
        let x: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..2 * 3 * 9).map(|_| rng.random_range(-0.5..0.5)).collect();
        let report = require_grad_check(
            "selftest conv2d",
            &[(x, vec![1, 3, 4, 4]), (w, vec![2, 3, 3, 3])],
            |inputs| inputs[0].conv2d(&inputs[1], None, 1, 1)?.sum_all(),
            1e-4,
            &GradCheckConfig::default(),
        )?;
        Ok(format!("conv2d max rel {:.2e}", report.max_rel))
    });

    suite.run("mock-cascade-continuity", |seed| {
        let px = 16;
        let tile = ramp_tile(px);
        let mut seeds = BTreeMap::new();
        seeds.insert(TileCoord::new(14, 0, 0)?, tile.clone());
        let job = CascadeJob {
            seeds,
            plan: StagePlan::new(14, 1, 1)?,
            sampler: Sampler::Ddim { steps: 4 },
            global_seed: seed,
            workers: 1,
        };
        let schedule = NoiseSchedule::linear(10, 1e-4, 0.02)?;
        let factory = MockFactory { factor: 2, codec_seed: seed ^ 0x2A };
        let rs = |_c: TileCoord| Ok(tile.clone());
        let result = run_cascade(&job, &factory, &rs, &schedule)?;
        ensure(result.tile_count() == 4, format!("{} tiles", result.tile_count()))?;
        let canvas = &result.canvases[&15];
        let oracle = tile.resize_bicubic(2 * px, 2 * px)?;
        let max = canvas
            .data()
            .iter()
            .zip(oracle.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        ensure(max < 1e-9, format!("canvas deviates from global upsample by {max:.2e}"))?;
        let seam = seam_score(canvas, px)?;
        ensure(seam.abs() < 1e-6, format!("seam score {seam:.2e}"))?;
        Ok(format!("canvas error {max:.2e}, seam {seam:.2e}"))
    });

    suite.run("stitch-gap-detection", |_| {
        let base = TileCoord::new(5, 0, 0)?;
        let mut tiles = BTreeMap::new();
        for child in base.children(1)? {
            tiles.insert(child, ramp_tile(8));
        }
        tiles.remove(&TileCoord::new(6, 0, 1)?);
        match stitch(&tiles) {
            Err(e) if e.to_string().contains("6/0/1") => Ok("gap named in error".into()),
            Err(e) => Err(CoreError::Contract(format!("gap error lacks coordinate: {e}"))),
            Ok(_) => Err(CoreError::Contract("stitch accepted a gapped mosaic".into())),
        }
    });

    suite.run("metric-closed-forms", |_| {
        let a = to_luma(&ImageBuf::from_planar(vec![-0.2; 3 * 16 * 16], 16, 16)?);
        let b16: Vec<f64> = a.data().iter().map(|v| v + 16.0).collect();
        let b = crate::metrics::Luma::new(b16, 16, 16)?;
        let p = psnr(&a, &b, 255.0)?;
        let want = 20.0 * (255.0f64 / 16.0).log10();
        ensure((p - want).abs() < 1e-3, format!("offset-16 psnr {p}"))?;
        let noise = ramp_tile(16);
        let l = to_luma(&noise);
        ensure((ssim(&l, &l, 255.0)? - 1.0).abs() < 1e-9, "ssim self not 1")?;
        let cov = vec![1.0, 0.0, 0.0, 1.0];
        let g1 = GaussianStats::new(vec![0.0, 0.0], cov.clone(), 4)?;
        let g2 = GaussianStats::new(vec![3.0, 4.0], cov, 4)?;
        let d = frechet_distance(&g1, &g2)?;
        ensure((d - 25.0).abs() < 1e-6, format!("mean-shift distance {d}"))?;
        let dp = GaussianStats::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 4.0], 4)?;
        let dq = GaussianStats::new(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 1.0], 4)?;
        let d2 = frechet_distance(&dp, &dq)?;
        ensure((d2 - 2.0).abs() < 1e-6, format!("diagonal distance {d2}"))?;
        Ok(format!("psnr {p:.4}, frechet {d:.6}/{d2:.6}"))
    });

    suite.run("fid-lite-self-distance", |seed| {
        let set: Vec<ImageBuf> = (0..4)
            .map(|i| crate::fixtures::synthetic_scene(seed ^ i, 16))
            .collect();
        let d = fid_lite(&set, &set)?;
        ensure(d < 1e-6, format!("self distance {d:.2e}"))?;
        Ok(format!("self distance {d:.2e}"))
    });

    suite.run("split-determinism", |seed| {
        let roots: Vec<TileCoord> = (0..10).map(|i| TileCoord::new(14, i, 0).unwrap()).collect();
        let a = split_regions(&roots, 0.2, seed)?;
        let b = split_regions(&roots, 0.2, seed)?;
        ensure(a == b, "split not deterministic")?;
        let tests = a.values().filter(|s| **s == Split::Test).count();
        ensure(tests == 2, format!("{tests} test roots"))?;
        let all_train = split_regions(&roots, 0.0, seed)?;
        ensure(all_train.values().all(|s| *s == Split::Train), "zero fraction must train-only")?;
        let c = TileCoord::new(16, 0b1101, 0b0110)?;
        ensure(quadrant_path(c, 2)? == vec![(0, 1), (1, 0)], "quadrant path wrong")?;
        Ok("splits deterministic, sized, quadrants consistent".into())
    });

    suite.results
}

/// Render results as one line per check, plus a summary tail line.
pub fn format_results(results: &[CheckResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "{} {} ... {}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    out.push_str(&format!(
        "selftest: {} checks, {} failed\n",
        results.len(),
        failed
    ));
    out
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_whole_suite_passes() {
        let results = run_selftest(0xFEED);
        let report = format_results(&results);
        assert!(all_passed(&results), "{report}");
        assert!(results.len() >= 12);
    }

    #[test]
    fn suite_is_seed_stable_in_shape() {
        let a = run_selftest(1);
        let b = run_selftest(2);
        assert_eq!(a.len(), b.len());
        assert!(all_passed(&a) && all_passed(&b));
    }
}
