//! Pixel/latent codecs.
//!
//! Diffusion runs on latents at 1/f of the pixel resolution. Two codecs are
//! provided: an exact, norm-preserving one built from space-to-depth plus a
//! seeded orthonormal channel mix (decode is its transpose, so the round
//! trip is lossless up to floating point), and a small learned convolutional
//! autoencoder for configurations that want a compressed channel count.

use crate::error::{CoreError, Result};
use crate::nn::{Conv2d, StateDict};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentSpec {
    /// Spatial downsampling factor (power of two).
    pub factor: usize,
    /// Channels of the latent tensor.
    pub channels: usize,
}

pub trait Codec {
    fn spec(&self) -> LatentSpec;
    /// [N, 3, H, W] -> [N, channels, H/f, W/f].
    fn encode(&self, x: &Tensor) -> Result<Tensor>;
    /// Inverse of `encode` (exactly or approximately, per codec).
    fn decode(&self, z: &Tensor) -> Result<Tensor>;
}

fn check_pixel_input(op: &'static str, x: &Tensor, factor: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(CoreError::invalid(op, format!("expected [N,3,H,W], got {s:?}")));
    }
    if s[2] % factor != 0 || s[3] % factor != 0 {
        return Err(CoreError::invalid(
            op,            format!("extent {}x{} not divisible by factor {factor}", s[2], s[3]),
        ));
    }
    Ok(())
}

// ── Exact codec ─────────────────────────────────────────────────────────

/// Lossless latent map: space_to_depth(f) followed by an orthonormal mix of
/// the 3f^2 channels. Because the mix is orthonormal and space-to-depth is a
/// permutation, encoding preserves inner products; mean-squared errors
/// computed in latent space equal those in pixel space.
pub struct ExactCodec {
    factor: usize,
    /// Orthonormal [D, D] mixing matrix as a 1x1 conv kernel [D, D, 1, 1].
    mix: Tensor,
    /// Its transpose, used for decoding.
    mix_t: Tensor,
}

impl ExactCodec {
    pub fn new(factor: usize, seed: u64) -> Result<ExactCodec> {
        if factor < 2 || !factor.is_power_of_two() {
            return Err(CoreError::invalid(
                "exact_codec",
                format!("factor {factor} must be a power of two >= 2"),
            ));
        }
        let d = 3 * factor * factor;
        let mut rng = stream_rng(seed, "latent-mix");
        let q = orthonormal_matrix(d, &mut rng);
        let mut qt = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                qt[c * d + r] = q[r * d + c];
            }
        }
        Ok(ExactCodec {
            factor,
            mix: Tensor::from_vec(q, &[d, d, 1, 1])?,
            mix_t: Tensor::from_vec(qt, &[d, d, 1, 1])?,
        })
    }
}

impl Codec for ExactCodec {
    fn spec(&self) -> LatentSpec {
        LatentSpec {
            factor: self.factor,
            channels: 3 * self.factor * self.factor,
        }
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        check_pixel_input("exact_encode", x, self.factor)?;
        x.space_to_depth(self.factor)?.conv2d(&self.mix, None, 1, 0)
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let d = 3 * self.factor * self.factor;
        let s = z.shape();
        if s.len() != 4 || s[1] != d {
            return Err(CoreError::invalid(
                "exact_decode",
                format!("expected [N,{d},h,w], got {s:?}"),
            ));
        }
        z.conv2d(&self.mix_t, None, 1, 0)?.depth_to_space(self.factor)
    }
}

/// Random orthonormal matrix via modified Gram-Schmidt on a seeded Gaussian
/// matrix, with one re-orthogonalization pass for numerical tightness.
fn orthonormal_matrix(d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut m: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(rng)).collect();
    for _pass in 0..2 {
        for i in 0..d {
            for j in 0..i {
                let dot: f64 = (0..d).map(|k| m[i * d + k] * m[j * d + k]).sum();
                for k in 0..d {
                    m[i * d + k] -= dot * m[j * d + k];
                }
            }
            let norm: f64 = (0..d).map(|k| m[i * d + k] * m[i * d + k]).sum::<f64>().sqrt();
            assert!(norm > 1e-9, "seeded Gaussian rows cannot be degenerate");
            for k in 0..d {
                m[i * d + k] /= norm;
            }
        }
    }
    m
}

// ── Learned codec ───────────────────────────────────────────────────────

/// Small convolutional autoencoder: stride-2 encoder, nearest-up decoder.
/// Trainable; the round trip is only approximate and must be fit to data.
pub struct LearnedCodec {
    factor: usize,
    latent_channels: usize,
    enc: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec: Vec<Conv2d>,
    dec_out: Conv2d,
}

impl LearnedCodec {
    pub fn new(factor: usize, latent_channels: usize, hidden: usize, seed: u64) -> Result<LearnedCodec> {
        if factor < 2 || !factor.is_power_of_two() {
            return Err(CoreError::invalid(
                "learned_codec",
                format!("factor {factor} must be a power of two >= 2"),
            ));
        }
        if latent_channels == 0 || hidden == 0 {
            return Err(CoreError::invalid("learned_codec", "zero-width layer"));
        }
        let halvings = factor.trailing_zeros() as usize;
        let mut rng = stream_rng(seed, "learned-codec");
        let mut enc = Vec::new();
        let mut c_in = 3;
        for _ in 0..halvings {
            enc.push(Conv2d::new(c_in, hidden, 3, 2, 1, true, &mut rng)?);
            c_in = hidden;
        }
        let enc_out = Conv2d::new(hidden, latent_channels, 3, 1, 1, true, &mut rng)?;
        let dec_in = Conv2d::new(latent_channels, hidden, 3, 1, 1, true, &mut rng)?;
        let mut dec = Vec::new();
        for _ in 0..halvings {
            dec.push(Conv2d::new(hidden, hidden, 3, 1, 1, true, &mut rng)?);
        }
        let dec_out = Conv2d::new(hidden, 3, 3, 1, 1, true, &mut rng)?;
        Ok(LearnedCodec {
            factor,
            latent_channels,
            enc,
            enc_out,
            dec_in,
            dec,
            dec_out,
        })
    }

    pub fn collect_params(&self, out: &mut Vec<(String, Tensor)>) {
        for (i, c) in self.enc.iter().enumerate() {
            c.collect_params(&format!("codec.enc{i}"), out);
        }
        self.enc_out.collect_params("codec.enc_out", out);
        self.dec_in.collect_params("codec.dec_in", out);
        for (i, c) in self.dec.iter().enumerate() {
            c.collect_params(&format!("codec.dec{i}"), out);
        }
        self.dec_out.collect_params("codec.dec_out", out);
    }

    pub fn state_dict(&self) -> StateDict {
        let mut params = Vec::new();
        self.collect_params(&mut params);
        crate::nn::state_dict(&params)
    }

    /// One reconstruction objective over a batch: mse(decode(encode(x)), x).
    pub fn reconstruction_loss(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)?.mse(x)
    }
}

impl Codec for LearnedCodec {
    fn spec(&self) -> LatentSpec {
        LatentSpec {
            factor: self.factor,
            channels: self.latent_channels,
        }
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        check_pixel_input("learned_encode", x, self.factor)?;
        let mut h = x.clone();
        for c in &self.enc {
            h = c.forward(&h)?.silu()?;
        }
        self.enc_out.forward(&h)
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.latent_channels {
            return Err(CoreError::invalid(
                "learned_decode",
                format!("expected [N,{},h,w], got {s:?}", self.latent_channels),
            ));
        }
        let mut h = self.dec_in.forward(z)?.silu()?;
        for c in &self.dec {
            h = h.upsample_nearest(2)?;
            h = c.forward(&h)?.silu()?;
        }
        self.dec_out.forward(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::NoiseSource;
    use crate::nn::AdamW;

    // ── Exact codec ─────────────────────────────────────────────────

    #[test]
    fn mixing_matrix_is_orthonormal() {
        let codec = ExactCodec::new(2, 7).unwrap();
        let d = 12;
        let q = codec.mix.to_vec();
        for r in 0..d {
            for c in 0..d {
                let dot: f64 = (0..d).map(|k| q[r * d + k] * q[c * d + k]).sum();
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12, "({r},{c}) -> {dot}");
            }
        }
    }

    #[test]
    fn exact_round_trip_is_lossless() {
        let codec = ExactCodec::new(4, 13).unwrap();
        let mut ns = NoiseSource::from_seed(1);
        let x = ns.standard_normal(&[2, 3, 8, 8]);
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 48, 2, 2]);
        let back = codec.decode(&z).unwrap();
        for (a, b) in x.to_vec().iter().zip(back.to_vec()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn encoding_preserves_norms_and_mse() {
        let codec = ExactCodec::new(2, 5).unwrap();
        let mut ns = NoiseSource::from_seed(2);
        let a = ns.standard_normal(&[1, 3, 6, 6]);
        let b = ns.standard_normal(&[1, 3, 6, 6]);
        let za = codec.encode(&a).unwrap();
        let zb = codec.encode(&b).unwrap();
        let sq = |t: &Tensor| t.to_vec().iter().map(|v| v * v).sum::<f64>();
        assert!((sq(&a) - sq(&za)).abs() / sq(&a) < 1e-12);
        let mse_pix = a.mse(&b).unwrap().item().unwrap();
        let mse_lat = za.mse(&zb).unwrap().item().unwrap();
        assert!((mse_pix - mse_lat).abs() / mse_pix < 1e-12);
    }

    #[test]
    fn different_seeds_give_different_mixes() {
        let a = ExactCodec::new(2, 1).unwrap();
        let b = ExactCodec::new(2, 2).unwrap();
        assert_ne!(a.mix.to_vec(), b.mix.to_vec());
    }

    #[test]
    fn invalid_factors_and_extents_rejected() {
        assert!(ExactCodec::new(3, 0).is_err());
        assert!(ExactCodec::new(1, 0).is_err());
        let codec = ExactCodec::new(4, 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 6, 6]);
        assert!(codec.encode(&x).is_err());
        let z = Tensor::zeros(&[1, 47, 2, 2]);
        assert!(codec.decode(&z).is_err());
    }

    #[test]
    fn spec_reports_three_f_squared_channels() {
        assert_eq!(
            ExactCodec::new(8, 0).unwrap().spec(),
            LatentSpec { factor: 8, channels: 192 }
        );
    }

    // ── Learned codec ───────────────────────────────────────────────

    #[test]
    fn learned_codec_shapes_line_up() {
        let codec = LearnedCodec::new(4, 8, 12, 3).unwrap();
        let x = Tensor::zeros(&[2, 3, 16, 16]);
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 8, 4, 4]);
        let y = codec.decode(&z).unwrap();
        assert_eq!(y.shape(), &[2, 3, 16, 16]);
    }

    #[test]
    fn learned_codec_fits_a_tiny_batch() {
        // A few optimizer steps should cut the reconstruction error hard;
        // the full overfit check lives in the integration suite.
        let codec = LearnedCodec::new(2, 6, 10, 11).unwrap();
        let mut ns = NoiseSource::from_seed(4);
        let x = ns.standard_normal(&[2, 3, 8, 8]).mul_scalar(0.3).unwrap();
        let mut params = Vec::new();
        codec.collect_params(&mut params);
        let mut opt = AdamW::new(3e-3, 0.0);
        let first = codec.reconstruction_loss(&x).unwrap().item().unwrap();
        let mut last = first;
        for _ in 0..150 {
            let loss = codec.reconstruction_loss(&x).unwrap();
            last = loss.item().unwrap();
            opt.zero_grad(&params);
            loss.backward().unwrap();
            opt.step(&params).unwrap();
        }
        assert!(
            last < first * 0.2,
            "reconstruction loss {first} -> {last} did not improve"
        );
    }
}
