//! Image-quality metrics: Y-channel PSNR and SSIM, and a Fréchet distance
//! over features from a frozen seeded projection network ("FID-lite").
//!
//! FID-lite replaces the usual pretrained Inception backbone with a fixed
//! random convolutional projection, so its absolute values are NOT
//! comparable to published FID numbers; only relative orderings produced
//! by this same binary are meaningful.

use crate::error::{CoreError, Result};
use crate::image::ImageBuf;
use crate::nn::Conv2d;
use crate::rng::stream_rng;

// ── Luma conversion ─────────────────────────────────────────────────────

/// Single-channel image on the 0..255 scale (continuous, not quantized).
#[derive(Debug, Clone, PartialEq)]
pub struct Luma {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Luma {
    pub fn new(data: Vec<f64>, width: usize, height: usize) -> Result<Luma> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(CoreError::invalid("Luma::new", "data length does not match extent"));
        }
        Ok(Luma { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// BT.601 full-range luma, Y = 0.299 R + 0.587 G + 0.114 B, computed on
/// the 8-bit scale. Grayscale inputs pass through unchanged.
pub fn to_luma(img: &ImageBuf) -> Luma {
    let (w, h) = (img.width(), img.height());
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = img.pixel(x, y);
            let to8 = |v: f64| (v + 1.0) / 2.0 * 255.0;
            data.push(0.299 * to8(r) + 0.587 * to8(g) + 0.114 * to8(b));
        }
    }
    Luma { width: w, height: h, data }
}

// ── PSNR ────────────────────────────────────────────────────────────────

/// 10·log10(peak² / MSE) in decibels. Identical inputs return +infinity;
/// reports serialize that sentinel as the string "inf".
pub fn psnr(a: &Luma, b: &Luma, peak: f64) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(CoreError::ShapeMismatch {
            op: "psnr",
            left: vec![a.width, a.height],
            right: vec![b.width, b.height],
        });
    }
    if peak <= 0.0 {
        return Err(CoreError::invalid("psnr", "peak must be positive"));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

// ── SSIM ────────────────────────────────────────────────────────────────

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode separable Gaussian filter; output is (w-10) x (h-10).
fn gauss_valid(data: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let ow = w - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * data[y * w + x + i];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let oh = h - SSIM_WINDOW + 1;
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * horiz[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Gaussian-windowed SSIM with the standard constants, averaged over all
/// valid window positions. Result lies in [-1, 1].
pub fn ssim(a: &Luma, b: &Luma, peak: f64) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(CoreError::ShapeMismatch {
            op: "ssim",
            left: vec![a.width, a.height],
            right: vec![b.width, b.height],
        });
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(CoreError::Contract(format!(
            "ssim needs images at least {SSIM_WINDOW} pixels on a side, got {}x{}",
            a.width, a.height
        )));
    }
    let (w, h) = (a.width, a.height);
    let sq_a: Vec<f64> = a.data.iter().map(|v| v * v).collect();
    let sq_b: Vec<f64> = b.data.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    let mu_a = gauss_valid(&a.data, w, h);
    let mu_b = gauss_valid(&b.data, w, h);
    let e_aa = gauss_valid(&sq_a, w, h);
    let e_bb = gauss_valid(&sq_b, w, h);
    let e_ab = gauss_valid(&ab, w, h);
    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (m1, m2) = (mu_a[i], mu_b[i]);
        let v1 = e_aa[i] - m1 * m1;
        let v2 = e_bb[i] - m2 * m2;
        let cov = e_ab[i] - m1 * m2;
        total += ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2))
            / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
    }
    Ok(total / mu_a.len() as f64)
}

// ── Gaussian statistics and Fréchet distance ────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major d x d covariance, symmetric by construction.
    pub covariance: Vec<f64>,
    pub sample_count: usize,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>, sample_count: usize) -> Result<GaussianStats> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(CoreError::invalid("GaussianStats::new", "covariance is not d x d"));
        }
        if sample_count < 2 {
            return Err(CoreError::invalid("GaussianStats::new", "need at least 2 samples"));
        }
        for i in 0..d {
            for j in 0..i {
                if (covariance[i * d + j] - covariance[j * d + i]).abs() > 1e-12 {
                    return Err(CoreError::invalid(
                        "GaussianStats::new",
                        format!("covariance asymmetric at ({i}, {j})"),
                    ));
                }
            }
        }
        Ok(GaussianStats { mean, covariance, sample_count })
    }

    /// Two-pass mean/covariance fit with the n-1 denominator. Feature
    /// vectors are accumulated in a canonical sorted order so the result
    /// is bit-identical under any input permutation.
    pub fn fit(features: &[Vec<f64>]) -> Result<GaussianStats> {
        let n = features.len();
        if n < 2 {
            return Err(CoreError::invalid("GaussianStats::fit", "need at least 2 samples"));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(CoreError::invalid("GaussianStats::fit", "inconsistent feature lengths"));
        }
        let mut order: Vec<&Vec<f64>> = features.iter().collect();
        order.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != std::cmp::Ordering::Equal)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut mean = vec![0.0; d];
        for f in &order {
            for (m, v) in mean.iter_mut().zip(f.iter()) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = vec![0.0; d * d];
        for f in &order {
            for i in 0..d {
                let di = f[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (f[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(GaussianStats { mean, covariance: cov, sample_count: n })
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn mat_mul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns of a row-major matrix).
fn jacobi_eigh(mat: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = mat.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = mat.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| ((p + 1)..d).map(move |q| (p, q)))
            .map(|(p, q)| a[p * d + q] * a[p * d + q])
            .sum();
        if off.sqrt() <= 1e-14 * scale {
            let eig = (0..d).map(|i| a[i * d + i]).collect();
            return Ok((eig, v));
        }
        for p in 0..d - 1 {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(CoreError::Contract(
        "jacobi eigendecomposition did not converge in 100 sweeps".into(),
    ))
}

const EIG_CLIP_TOLERANCE: f64 = -1e-8;

/// Rebuild f(A) = V f(lambda) V^T for a symmetric A, clipping slightly
/// negative eigenvalues to zero and rejecting anything below -1e-8.
fn symmetric_matrix_sqrt(mat: &[f64], d: usize, op: &'static str) -> Result<Vec<f64>> {
    let (eig, v) = jacobi_eigh(mat, d)?;
    let scale = eig.iter().fold(0.0f64, |m, e| m.max(e.abs())).max(1.0);
    let mut roots = Vec::with_capacity(d);
    for &e in &eig {
        if e < EIG_CLIP_TOLERANCE * scale {
            return Err(CoreError::Contract(format!(
                "{op}: eigenvalue {e:.3e} below the clipping tolerance; covariance is not PSD"
            )));
        }
        roots.push(e.max(0.0).sqrt());
    }
    // V diag(roots) V^T
    let mut vd = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            vd[i * d + j] = v[i * d + j] * roots[j];
        }
    }
    let mut vt = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            vt[i * d + j] = v[j * d + i];
        }
    }
    Ok(mat_mul(&vd, &vt, d))
}

/// Squared Fréchet distance between two Gaussians:
/// ||mu_p - mu_q||^2 + Tr(Sigma_p + Sigma_q - 2 (Sigma_p Sigma_q)^{1/2}).
/// The cross term is evaluated through the symmetric product
/// sqrt(Sigma_q) Sigma_p sqrt(Sigma_q), which has the same spectrum.
pub fn frechet_distance(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    let d = p.dim();
    if q.dim() != d {
        return Err(CoreError::ShapeMismatch {
            op: "frechet_distance",
            left: vec![d],
            right: vec![q.dim()],
        });
    }
    let mean_term: f64 = p
        .mean
        .iter()
        .zip(&q.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let sqrt_q = symmetric_matrix_sqrt(&q.covariance, d, "frechet_distance")?;
    let inner = mat_mul(&sqrt_q, &mat_mul(&p.covariance, &sqrt_q, d), d);
    // Symmetrize against round-off before the second decomposition.
    let mut sym = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (eig, _) = jacobi_eigh(&sym, d)?;
    let scale = eig.iter().fold(0.0f64, |m, e| m.max(e.abs())).max(1.0);
    let mut cross = 0.0;
    for &e in &eig {
        if e < EIG_CLIP_TOLERANCE * scale {
            return Err(CoreError::Contract(format!(
                "frechet_distance: eigenvalue {e:.3e} below the clipping tolerance"
            )));
        }
        cross += e.max(0.0).sqrt();
    }
    let trace = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    let value = mean_term + trace(&p.covariance) + trace(&q.covariance) - 2.0 * cross;
    // Exact-zero distances can come out a hair negative.
    Ok(value.max(0.0))
}

// ── FID-lite ────────────────────────────────────────────────────────────

/// Seed of the frozen feature extractor. Changing it invalidates every
/// previously reported FID-lite number.
pub const FEATURE_NET_SEED: u64 = 0x7116_5EED_F1D5_CA1E;

pub const FEATURE_DIM: usize = 64;

/// Frozen random projection CNN: three stride-2 convolutions with silu,
/// then global average pooling to a 64-dimensional descriptor.
pub struct FeatureNet {
    convs: [Conv2d; 3],
}

impl FeatureNet {
    pub fn new() -> Result<FeatureNet> {
        let mut rng = stream_rng(FEATURE_NET_SEED, "fid-lite");
        Ok(FeatureNet {
            convs: [
                Conv2d::new(3, 16, 3, 2, 1, true, &mut rng)?,
                Conv2d::new(16, 32, 3, 2, 1, true, &mut rng)?,
                Conv2d::new(32, FEATURE_DIM, 3, 2, 1, true, &mut rng)?,
            ],
        })
    }

    pub fn features(&self, img: &ImageBuf) -> Result<Vec<f64>> {
        if img.width() < 8 || img.height() < 8 {
            return Err(CoreError::invalid("FeatureNet::features", "image smaller than 8x8"));
        }
        let mut x = img
            .to_tensor()
            .reshape(&[1, 3, img.height(), img.width()])?;
        for conv in &self.convs {
            x = conv.forward(&x)?.silu()?;
        }
        let shape = x.shape().to_vec();
        let (c, spatial) = (shape[1], shape[2] * shape[3]);
        let values = x.to_vec();
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let sum: f64 = values[ch * spatial..(ch + 1) * spatial].iter().sum();
            out.push(sum / spatial as f64);
        }
        Ok(out)
    }
}

/// Fréchet distance between feature distributions of two image sets.
/// Order of images within a set does not affect the result.
pub fn fid_lite(set_a: &[ImageBuf], set_b: &[ImageBuf]) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(CoreError::invalid("fid_lite", "each set needs at least 2 images"));
    }
    let net = FeatureNet::new()?;
    let feats = |set: &[ImageBuf]| -> Result<Vec<Vec<f64>>> {
        set.iter().map(|img| net.features(img)).collect()
    };
    let p = GaussianStats::fit(&feats(set_a)?)?;
    let q = GaussianStats::fit(&feats(set_b)?)?;
    frechet_distance(&p, &q)
}

// ── Reports ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub level: u8,
    pub n: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub fid_lite: f64,
}

fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Tab-separated evaluation table: level, n, psnr, ssim, fid_lite.
pub fn format_report(rows: &[EvalRow]) -> String {
    let mut out = String::from("level\tn\tpsnr\tssim\tfid_lite\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\n",
            r.level,
            r.n,
            format_db(r.psnr),
            r.ssim,
            r.fid_lite
        ));
    }
    out
}

/// Aggregate one level: mean Y-PSNR and SSIM over aligned pairs plus
/// FID-lite between the sets.
pub fn evaluate_level(level: u8, generated: &[ImageBuf], truth: &[ImageBuf]) -> Result<EvalRow> {
    if generated.len() != truth.len() || generated.is_empty() {
        return Err(CoreError::invalid(
            "evaluate_level",
            "generated and truth sets must be non-empty and aligned",
        ));
    }
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (g, t) in generated.iter().zip(truth) {
        let (gl, tl) = (to_luma(g), to_luma(t));
        psnr_sum += psnr(&gl, &tl, 255.0)?;
        ssim_sum += ssim(&gl, &tl, 255.0)?;
    }
    let n = generated.len();
    let fid = if n >= 2 { fid_lite(generated, truth)? } else { f64::NAN };
    Ok(EvalRow {
        level,
        n,
        psnr: psnr_sum / n as f64,
        ssim: ssim_sum / n as f64,
        fid_lite: fid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn const_image(px: usize, rgb: [f64; 3]) -> ImageBuf {
        let mut img = ImageBuf::new(px, px).unwrap();
        for y in 0..px {
            for x in 0..px {
                img.set_pixel(x, y, rgb);
            }
        }
        img
    }

    fn noise_image(px: usize, seed: u64, lo: f64, hi: f64) -> ImageBuf {
        let mut rng = rng_from_seed(seed);
        let mut img = ImageBuf::new(px, px).unwrap();
        for y in 0..px {
            for x in 0..px {
                img.set_pixel(
                    x,
                    y,
                    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)],
                );
            }
        }
        img
    }

    fn const_luma(w: usize, h: usize, v: f64) -> Luma {
        Luma::new(vec![v; w * h], w, h).unwrap()
    }

    // ── Luma ────────────────────────────────────────────────────────

    #[test]
    fn luma_weights_hit_the_standard_values() {
        let white = to_luma(&const_image(4, [1.0, 1.0, 1.0]));
        assert!((white.data()[0] - 255.0).abs() < 1e-9);
        let red = to_luma(&const_image(4, [1.0, -1.0, -1.0]));
        assert!((red.data()[0] - 76.245).abs() < 1e-9);
        let gray = to_luma(&const_image(4, [0.25, 0.25, 0.25]));
        assert!((gray.data()[0] - (0.25 + 1.0) / 2.0 * 255.0).abs() < 1e-9);
    }

    // ── PSNR ────────────────────────────────────────────────────────

    #[test]
    fn psnr_identical_is_the_infinity_sentinel() {
        let a = to_luma(&noise_image(16, 0, -0.9, 0.9));
        assert!(psnr(&a, &a, 255.0).unwrap().is_infinite());
        assert_eq!(format_db(f64::INFINITY), "inf");
    }

    #[test]
    fn psnr_constant_offsets_match_the_closed_form() {
        let a = const_luma(16, 16, 100.0);
        let b = const_luma(16, 16, 116.0);
        let expected = 20.0 * (255.0f64 / 16.0).log10();
        assert!((psnr(&a, &b, 255.0).unwrap() - expected).abs() < 1e-9);
        let z = const_luma(16, 16, 0.0);
        let p = const_luma(16, 16, 255.0);
        assert!((psnr(&z, &p, 255.0).unwrap() - 0.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_as_noise_grows() {
        let base = to_luma(&const_image(16, [0.0, 0.0, 0.0]));
        let mut rng = rng_from_seed(5);
        let offsets: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [2.0, 8.0, 32.0] {
            let noisy = Luma::new(
                base.data().iter().zip(&offsets).map(|(v, o)| v + amp * o).collect(),
                16,
                16,
            )
            .unwrap();
            let p = psnr(&base, &noisy, 255.0).unwrap();
            assert!(p < last, "psnr must fall as amplitude rises");
            last = p;
        }
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = const_luma(8, 8, 1.0);
        let b = const_luma(8, 4, 1.0);
        assert!(psnr(&a, &b, 255.0).is_err());
    }

    // ── SSIM ────────────────────────────────────────────────────────

    /// Direct 11x11 windowed reference implementation, no separability.
    fn ssim_oracle(a: &Luma, b: &Luma) -> f64 {
        let k = gaussian_kernel();
        let (w, h) = (a.width(), a.height());
        let c1 = (SSIM_K1 * 255.0) * (SSIM_K1 * 255.0);
        let c2 = (SSIM_K2 * 255.0) * (SSIM_K2 * 255.0);
        let mut total = 0.0;
        let mut count = 0;
        for wy in 0..=(h - SSIM_WINDOW) {
            for wx in 0..=(w - SSIM_WINDOW) {
                let (mut m1, mut m2) = (0.0, 0.0);
                let (mut e11, mut e22, mut e12) = (0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let weight = k[dy] * k[dx];
                        let va = a.data()[(wy + dy) * w + wx + dx];
                        let vb = b.data()[(wy + dy) * w + wx + dx];
                        m1 += weight * va;
                        m2 += weight * vb;
                        e11 += weight * va * va;
                        e22 += weight * vb * vb;
                        e12 += weight * va * vb;
                    }
                }
                let (v1, v2, cov) = (e11 - m1 * m1, e22 - m2 * m2, e12 - m1 * m2);
                total += ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2))
                    / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_of_anything_with_itself_is_one() {
        for seed in 0..3 {
            let a = to_luma(&noise_image(16, seed, -0.9, 0.9));
            assert!((ssim(&a, &a, 255.0).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_matches_the_direct_windowed_oracle() {
        let a = to_luma(&noise_image(20, 11, -0.9, 0.9));
        let negative = Luma::new(a.data().iter().map(|v| 255.0 - v).collect(), 20, 20).unwrap();
        let fast = ssim(&a, &negative, 255.0).unwrap();
        let slow = ssim_oracle(&a, &negative);
        assert!((fast - slow).abs() < 1e-12, "fast {fast} oracle {slow}");
        // And on an uncorrelated pair.
        let b = to_luma(&noise_image(20, 12, -0.9, 0.9));
        assert!((ssim(&a, &b, 255.0).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_pair_reduces_to_the_luminance_term() {
        let a = const_luma(16, 16, 0.0);
        let b = const_luma(16, 16, 255.0);
        let c1 = (SSIM_K1 * 255.0) * (SSIM_K1 * 255.0);
        let closed = c1 / (255.0 * 255.0 + c1);
        assert!((ssim(&a, &b, 255.0).unwrap() - closed).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_bounds_hold() {
        let a = to_luma(&noise_image(16, 3, -0.9, 0.9));
        let b = to_luma(&noise_image(16, 4, -0.9, 0.9));
        let ab = ssim(&a, &b, 255.0).unwrap();
        let ba = ssim(&b, &a, 255.0).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn ssim_rejects_undersized_images() {
        let a = const_luma(10, 10, 1.0);
        assert!(ssim(&a, &a, 255.0).is_err());
    }

    // ── Fréchet distance ────────────────────────────────────────────

    #[test]
    fn jacobi_reconstructs_a_random_symmetric_matrix() {
        let d = 6;
        let mut rng = rng_from_seed(17);
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let v = rng.random_range(-1.0..1.0);
                m[i * d + j] = v;
                m[j * d + i] = v;
            }
        }
        let (eig, v) = jacobi_eigh(&m, d).unwrap();
        // Trace is preserved.
        let tr: f64 = (0..d).map(|i| m[i * d + i]).sum();
        assert!((eig.iter().sum::<f64>() - tr).abs() < 1e-9);
        // V diag(eig) V^T reproduces the input.
        let mut vd = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                vd[i * d + j] = v[i * d + j] * eig[j];
            }
        }
        let mut vt = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                vt[i * d + j] = v[j * d + i];
            }
        }
        let rebuilt = mat_mul(&vd, &vt, d);
        for (a, b) in rebuilt.iter().zip(&m) {
            assert!((a - b).abs() < 1e-9);
        }
        // Columns are orthonormal.
        let gram = mat_mul(&vt, &v, d);
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[i * d + j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn frechet_zero_for_identical_stats() {
        let stats = GaussianStats::new(
            vec![1.0, -2.0, 0.5],
            vec![2.0, 0.3, 0.1, 0.3, 1.5, 0.0, 0.1, 0.0, 1.0],
            10,
        )
        .unwrap();
        let dist = frechet_distance(&stats, &stats).unwrap();
        assert!(dist.abs() < 1e-9, "distance {dist}");
    }

    #[test]
    fn frechet_mean_shift_with_equal_covariance_is_the_squared_shift() {
        let cov = vec![1.3, 0.2, 0.2, 0.8];
        let p = GaussianStats::new(vec![0.0, 0.0], cov.clone(), 5).unwrap();
        let q = GaussianStats::new(vec![3.0, 4.0], cov, 5).unwrap();
        let dist = frechet_distance(&p, &q).unwrap();
        assert!((dist - 25.0).abs() < 1e-6, "distance {dist}");
    }

    #[test]
    fn frechet_diagonal_closed_form() {
        let p = GaussianStats::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 4.0], 5).unwrap();
        let q = GaussianStats::new(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 1.0], 5).unwrap();
        let dist = frechet_distance(&p, &q).unwrap();
        assert!((dist - 2.0).abs() < 1e-6, "distance {dist}");
    }

    #[test]
    fn frechet_is_symmetric() {
        let p = GaussianStats::new(vec![0.3, -0.4], vec![1.0, 0.4, 0.4, 2.0], 5).unwrap();
        let q = GaussianStats::new(vec![-1.0, 0.2], vec![0.5, -0.1, -0.1, 0.7], 5).unwrap();
        let pq = frechet_distance(&p, &q).unwrap();
        let qp = frechet_distance(&q, &p).unwrap();
        assert!((pq - qp).abs() < 1e-9);
        assert!(pq > 0.0);
    }

    #[test]
    fn frechet_rejects_dimension_mismatch_and_asymmetry() {
        let p = GaussianStats::new(vec![0.0], vec![1.0], 5).unwrap();
        let q = GaussianStats::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], 5).unwrap();
        assert!(frechet_distance(&p, &q).is_err());
        assert!(GaussianStats::new(vec![0.0, 0.0], vec![1.0, 0.5, 0.0, 1.0], 5).is_err());
        assert!(GaussianStats::new(vec![0.0], vec![1.0], 1).is_err());
    }

    // ── FID-lite ────────────────────────────────────────────────────

    fn brightness_shift(img: &ImageBuf, shift_8bit: f64) -> ImageBuf {
        let delta = shift_8bit / 127.5;
        let data = img.data().iter().map(|v| v + delta).collect();
        ImageBuf::from_planar(data, img.width(), img.height()).unwrap()
    }

    #[test]
    fn fid_lite_of_a_set_with_itself_vanishes() {
        let set: Vec<ImageBuf> = (0..4).map(|i| noise_image(16, i, -0.5, 0.3)).collect();
        let d = fid_lite(&set, &set).unwrap();
        assert!(d < 1e-6, "distance {d}");
    }

    #[test]
    fn fid_lite_grows_with_brightness_shift() {
        let set: Vec<ImageBuf> = (0..6).map(|i| noise_image(16, 100 + i, -0.5, 0.3)).collect();
        let mut last = 0.0;
        for shift in [8.0, 16.0, 32.0] {
            let shifted: Vec<ImageBuf> = set.iter().map(|i| brightness_shift(i, shift)).collect();
            let d = fid_lite(&set, &shifted).unwrap();
            assert!(d > last, "shift {shift}: {d} not above {last}");
            last = d;
        }
    }

    #[test]
    fn fid_lite_noise_vs_noise_stays_below_the_shift_case() {
        // Sampling bias of the Gaussian fit scales like dim/n, so the
        // equal-distribution comparison needs enough images per set.
        let a: Vec<ImageBuf> = (0..64).map(|i| noise_image(16, 200 + i, -0.5, 0.3)).collect();
        let b: Vec<ImageBuf> = (0..64).map(|i| noise_image(16, 300 + i, -0.5, 0.3)).collect();
        let near = fid_lite(&a, &b).unwrap();
        let shifted: Vec<ImageBuf> = a.iter().map(|i| brightness_shift(i, 16.0)).collect();
        let far = fid_lite(&a, &shifted).unwrap();
        assert!(near < far, "near {near} far {far}");
    }

    #[test]
    fn fid_lite_ignores_image_order() {
        let a: Vec<ImageBuf> = (0..5).map(|i| noise_image(16, 400 + i, -0.5, 0.3)).collect();
        let b: Vec<ImageBuf> = (0..5).map(|i| noise_image(16, 500 + i, -0.5, 0.3)).collect();
        let forward = fid_lite(&a, &b).unwrap();
        let mut b_rev = b.clone();
        b_rev.reverse();
        let reversed = fid_lite(&a, &b_rev).unwrap();
        assert_eq!(forward.to_bits(), reversed.to_bits());
    }

    // ── Reports ─────────────────────────────────────────────────────

    #[test]
    fn report_rows_serialize_infinity_as_inf() {
        let rows = vec![
            EvalRow { level: 15, n: 4, psnr: f64::INFINITY, ssim: 1.0, fid_lite: 0.0 },
            EvalRow { level: 16, n: 16, psnr: 21.1234, ssim: 0.815, fid_lite: 3.25 },
        ];
        let text = format_report(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "level\tn\tpsnr\tssim\tfid_lite");
        assert_eq!(lines[1], "15\t4\tinf\t1.0000\t0.0000");
        assert_eq!(lines[2], "16\t16\t21.1234\t0.8150\t3.2500");
    }

    #[test]
    fn evaluate_level_aggregates_pairs() {
        let truth: Vec<ImageBuf> = (0..3).map(|i| noise_image(16, 600 + i, -0.5, 0.3)).collect();
        let row = evaluate_level(16, &truth, &truth).unwrap();
        assert_eq!(row.n, 3);
        assert!(row.psnr.is_infinite());
        assert!((row.ssim - 1.0).abs() < 1e-9);
        assert!(row.fid_lite < 1e-6);
    }
}
