use std::time::Instant;
use tilegen_core::codec::{Codec, ExactCodec};
use tilegen_core::denoiser::{train_step, ConditionalDenoiser, ModelConfig, TrainScope};
use tilegen_core::diffusion::{ddim_timesteps, sample_ddim, NoiseSchedule, NoiseSource};
use tilegen_core::fixtures::{fixture_batch, overfit_fixture, stack_images};
use tilegen_core::image::ImageBuf;
use tilegen_core::metrics::{psnr, to_luma};
use tilegen_core::nn::{cosine_lr, AdamW};
use tilegen_core::rng::{child_seed, rng_from_seed};

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "b".into());
    let (beta2, base_lr, hold) = match mode.as_str() {
        "b" => (0.999, 6e-3, 1000),
        "c" => (0.99, 6e-3, 1000),
        other => panic!("unknown mode {other}"),
    };
    println!("mode {mode}: beta2 {beta2} lr {base_lr} hold {hold}");

    let fixture = overfit_fixture(16, 32, 2, 42).unwrap();
    let codec = ExactCodec::new(4, 42).unwrap();
    let batch = fixture_batch(&fixture, &codec).unwrap();
    let schedule = NoiseSchedule::desk();
    let cfg = ModelConfig::desk(4);
    let model = ConditionalDenoiser::new(cfg, 7).unwrap();
    let mut opt = AdamW::new(base_lr, 0.0);
    opt.beta2 = beta2;
    opt.clip_norm = Some(1.0);
    let mut rng = rng_from_seed(1);
    let start = Instant::now();
    let total = 2000;
    let mut recent = Vec::new();
    let mut gmax = 0.0f64;
    for step in 0..total {
        opt.lr = if step < hold {
            base_lr
        } else {
            cosine_lr(base_lr, base_lr / 10.0, step - hold, total - hold)
        };
        let loss =
            train_step(&model, &batch, &schedule, &mut opt, TrainScope::All, &mut rng).unwrap();
        let gsq: f64 = model
            .params()
            .iter()
            .filter_map(|(_, p)| p.grad())
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum();
        gmax = gmax.max(gsq.sqrt());
        recent.push(loss);
        if recent.len() > 50 {
            recent.remove(0);
        }
        if (step + 1) % 100 == 0 {
            let avg: f64 = recent.iter().sum::<f64>() / recent.len() as f64;
            println!(
                "step {:4} avg50 {avg:.4} lr {:.2e} gmax {gmax:.3} ({:.0}s)",
                step + 1,
                opt.lr,
                start.elapsed().as_secs_f64()
            );
            gmax = 0.0;
        }
    }

    // DDIM sampling PSNR against the fixture targets.
    let timesteps = ddim_timesteps(&schedule, 25).unwrap();
    let latent_shape = [1usize, 48, 8, 8];
    let mut psnrs = Vec::new();
    for i in 0..fixture.maps.len() {
        let rs_i = stack_images(std::slice::from_ref(&fixture.rs[i])).unwrap();
        let ref_i = stack_images(std::slice::from_ref(&fixture.refs[i])).unwrap();
        let prompt_i = vec![fixture.prompts[i].clone()];
        let mut src = NoiseSource::from_seed(child_seed(1, &format!("sample{i}")));
        let z0 = sample_ddim(
            |y, t| model.predict(y, &[t], &prompt_i, &rs_i, &ref_i),
            &latent_shape,
            &schedule,
            &timesteps,
            &mut src,
        )
        .unwrap();
        let decoded = codec.decode(&z0).unwrap();
        let img = ImageBuf::from_tensor(&decoded).unwrap();
        let p = psnr(&to_luma(&img), &to_luma(&fixture.maps[i]), 255.0).unwrap();
        psnrs.push(p);
    }
    let mean = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
    let min = psnrs.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "ddim psnr mean {mean:.2} dB min {min:.2} dB ({:.0}s total)",
        start.elapsed().as_secs_f64()
    );
}
