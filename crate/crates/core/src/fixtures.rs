//! Deterministic synthetic scenes and tile pairs for tests, the built-in
//! self-check suite, and small training demos. Everything is seeded; the
//! same inputs always produce the same pixels.

use rand::Rng;

use crate::codec::Codec;
use crate::denoiser::TrainBatch;
use crate::error::Result;
use crate::image::ImageBuf;
use crate::rng::stream_rng;
use crate::tensor::Tensor;
use crate::tile::scale_prompt;

/// Smooth pseudo-terrain: a couple of seeded sinusoidal ridges plus a
/// diagonal trend, well inside [-1, 1].
pub fn synthetic_scene(seed: u64, px: usize) -> ImageBuf {
    let mut rng = stream_rng(seed, "fixture-scene");
    let fx: f64 = rng.random_range(1.0..3.0);
    let fy: f64 = rng.random_range(1.0..3.0);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let tilt: f64 = rng.random_range(-0.3..0.3);
    let mut img = ImageBuf::new(px, px).expect("positive extent");
    for y in 0..px {
        for x in 0..px {
            let (u, v) = (x as f64 / px as f64, y as f64 / px as f64);
            let ridge = (fx * std::f64::consts::TAU * u + phase).sin()
                * (fy * std::f64::consts::TAU * v).cos();
            let base = 0.45 * ridge + tilt * (u - v);
            img.set_pixel(
                x,
                y,
                [base, 0.5 * base + 0.2 * (u - 0.5), -0.4 * base + 0.2 * (v - 0.5)],
            );
        }
    }
    img
}

/// Posterize a scene into a map-like rendering: a small fixed palette
/// chosen by thresholding the first channel, plus darkened "road" lines
/// where the field crosses zero.
pub fn stylize_map(rs: &ImageBuf) -> ImageBuf {
    let px = rs.width();
    let mut map = ImageBuf::new(px, rs.height()).expect("positive extent");
    for y in 0..rs.height() {
        for x in 0..px {
            let [r, _, _] = rs.pixel(x, y);
            let color = if r > 0.25 {
                [0.85, 0.75, 0.55]
            } else if r > -0.25 {
                [0.55, 0.8, 0.55]
            } else {
                [0.45, 0.6, 0.9]
            };
            let line = if r.abs() < 0.04 { -0.5 } else { 0.0 };
            map.set_pixel(x, y, [color[0] + line, color[1] + line, color[2] + line]);
        }
    }
    map
}

/// A paired RS/map tile: the map is a deterministic stylization of the
/// synthetic RS scene, so the translation is learnable.
pub fn synthetic_tile_pair(seed: u64, px: usize) -> (ImageBuf, ImageBuf) {
    let rs = synthetic_scene(seed, px);
    let map = stylize_map(&rs);
    (rs, map)
}

/// Cascade-style reference: the map downsampled by `factor` and brought
/// back to full size, i.e. what a parent (factor 2) or grandparent
/// (factor 4) tile would contribute.
pub fn reference_from_map(map: &ImageBuf, factor: usize) -> Result<ImageBuf> {
    let (w, h) = (map.width(), map.height());
    map.resize_bicubic(w / factor, h / factor)?.resize_bicubic(w, h)
}

/// The overfit corpus: n aligned (rs, map, reference, prompt) tuples.
pub struct OverfitFixture {
    pub rs: Vec<ImageBuf>,
    pub maps: Vec<ImageBuf>,
    pub refs: Vec<ImageBuf>,
    pub prompts: Vec<String>,
}

/// Build n synthetic pairs with cycling pyramid levels 15..=18 and
/// references constructed at the given cascade factor.
pub fn overfit_fixture(n: usize, px: usize, ref_factor: usize, seed: u64) -> Result<OverfitFixture> {
    let mut fixture = OverfitFixture {
        rs: Vec::with_capacity(n),
        maps: Vec::with_capacity(n),
        refs: Vec::with_capacity(n),
        prompts: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (rs, map) = synthetic_tile_pair(seed.wrapping_add(i as u64), px);
        fixture.refs.push(reference_from_map(&map, ref_factor)?);
        fixture.rs.push(rs);
        fixture.maps.push(map);
        fixture.prompts.push(scale_prompt(15 + (i % 4) as u8)?);
    }
    Ok(fixture)
}

/// Stack images into one [N, 3, H, W] tensor.
pub fn stack_images(images: &[ImageBuf]) -> Result<Tensor> {
    let parts: Result<Vec<Tensor>> = images
        .iter()
        .map(|img| img.to_tensor().reshape(&[1, 3, img.height(), img.width()]))
        .collect();
    Tensor::concat(&parts?, 0)
}

/// Encode the maps and assemble a training batch over the whole fixture.
pub fn fixture_batch(fixture: &OverfitFixture, codec: &dyn Codec) -> Result<TrainBatch> {
    let latents: Result<Vec<Tensor>> = fixture
        .maps
        .iter()
        .map(|m| codec.encode(&m.to_tensor().reshape(&[1, 3, m.height(), m.width()])?))
        .collect();
    Ok(TrainBatch {
        latents: Tensor::concat(&latents?, 0)?.detach(),
        rs: stack_images(&fixture.rs)?,
        refs: stack_images(&fixture.refs)?,
        prompts: fixture.prompts.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ExactCodec;

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let a = synthetic_scene(9, 32);
        let b = synthetic_scene(9, 32);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let c = synthetic_scene(10, 32);
        assert_ne!(a, c, "different seeds must differ");
    }

    #[test]
    fn maps_use_a_small_palette_plus_lines() {
        let (_, map) = synthetic_tile_pair(4, 32);
        let mut distinct: Vec<u64> = map
            .data()
            .chunks(map.width() * map.height())
            .next()
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert!(distinct.len() <= 6, "expected few distinct red values, got {}", distinct.len());
    }

    #[test]
    fn references_lose_detail_monotonically() {
        let (_, map) = synthetic_tile_pair(7, 32);
        let r2 = reference_from_map(&map, 2).unwrap();
        let r4 = reference_from_map(&map, 4).unwrap();
        let err = |a: &ImageBuf, b: &ImageBuf| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        assert!(err(&r4, &map) > err(&r2, &map), "coarser references must differ more");
    }

    #[test]
    fn batches_line_up_with_the_codec_geometry() {
        let fixture = overfit_fixture(6, 32, 2, 11).unwrap();
        let codec = ExactCodec::new(4, 3).unwrap();
        let batch = fixture_batch(&fixture, &codec).unwrap();
        assert_eq!(batch.latents.shape(), &[6, 48, 8, 8]);
        assert_eq!(batch.rs.shape(), &[6, 3, 32, 32]);
        assert_eq!(batch.refs.shape(), &[6, 3, 32, 32]);
        assert_eq!(batch.prompts.len(), 6);
        assert!(batch.prompts[0].starts_with("level 15;"));
        assert!(batch.prompts[3].starts_with("level 18;"));
    }
}
