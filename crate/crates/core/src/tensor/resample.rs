//! Bicubic resampling with the Catmull-Rom kernel (a = −0.5).
//!
//! Geometry convention: half-pixel centres, so source coordinate
//! `s = (d + 0.5) · in/out − 0.5` for destination index `d`. Taps outside
//! the image clamp to the nearest edge pixel. The forward pass is separable
//! (horizontal then vertical) and its arithmetic order is part of the
//! contract: golden vectors pin the exact bit pattern.

use crate::error::{CoreError, Result};

use super::Tensor;

/// Catmull-Rom weight for a signed distance.
fn kernel(d: f64) -> f64 {
    const A: f64 = -0.5;
    let x = d.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        A * (((x - 5.0) * x + 8.0) * x - 4.0)
    } else {
        0.0
    }
}

/// Per-axis tap table: 4 clamped source indices and their weights for each
/// destination index.
fn tap_table(in_len: usize, out_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let s = (d as f64 + 0.5) * scale - 0.5;
            let base = s.floor();
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for (t, (i, wv)) in idx.iter_mut().zip(w.iter_mut()).enumerate() {
                let tap = base + (t as f64 - 1.0);
                *wv = kernel(s - tap);
                *i = tap.max(0.0).min(in_len as f64 - 1.0) as usize;
            }
            (idx, w)
        })
        .collect()
}

/// Resamples one plane. This is the reference routine shared by the tensor
/// op, the dataset builder and the cascade engine.
pub fn resample_plane_bicubic(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    assert!(h > 0 && w > 0 && oh > 0 && ow > 0, "empty extent in resample");
    assert_eq!(src.len(), h * w, "plane length mismatch");
    let xt = tap_table(w, ow);
    let yt = tap_table(h, oh);

    // Horizontal pass: (h, w) → (h, ow)
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let out_row = &mut tmp[y * ow..(y + 1) * ow];
        for (o, (idx, wt)) in out_row.iter_mut().zip(&xt) {
            *o = wt[0] * row[idx[0]] + wt[1] * row[idx[1]] + wt[2] * row[idx[2]] + wt[3] * row[idx[3]];
        }
    }
    // Vertical pass: (h, ow) → (oh, ow)
    let mut out = vec![0.0; oh * ow];
    for (oy, (idx, wt)) in yt.iter().enumerate() {
        let rows = [
            &tmp[idx[0] * ow..idx[0] * ow + ow],
            &tmp[idx[1] * ow..idx[1] * ow + ow],
            &tmp[idx[2] * ow..idx[2] * ow + ow],
            &tmp[idx[3] * ow..idx[3] * ow + ow],
        ];
        let dst = &mut out[oy * ow..(oy + 1) * ow];
        for (x, o) in dst.iter_mut().enumerate() {
            *o = wt[0] * rows[0][x] + wt[1] * rows[1][x] + wt[2] * rows[2][x] + wt[3] * rows[3][x];
        }
    }
    out
}

impl Tensor {
    /// Bicubic resampling of an NCHW tensor to a new spatial extent. The op
    /// is linear in its input, so the adjoint scatters with the same tap
    /// weights.
    pub fn resample_bicubic(&self, oh: usize, ow: usize) -> Result<Tensor> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(CoreError::invalid("resample_bicubic", format!("expected NCHW, got {s:?}")));
        }
        if oh == 0 || ow == 0 {
            return Err(CoreError::invalid("resample_bicubic", "output extents must be positive"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut data = vec![0.0; n * c * oh * ow];
        self.with_data(|x| {
            for plane in 0..n * c {
                let out = resample_plane_bicubic(&x[plane * h * w..(plane + 1) * h * w], h, w, oh, ow);
                data[plane * oh * ow..(plane + 1) * oh * ow].copy_from_slice(&out);
            }
        });
        let pa = self.clone();
        Tensor::from_op("resample_bicubic", vec![n, c, oh, ow], data, vec![self.clone()], move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    let xt = tap_table(w, ow);
                    let yt = tap_table(h, oh);
                    let mut da = vec![0.0; n * c * h * w];
                    for plane in 0..n * c {
                        let gp = &g[plane * oh * ow..(plane + 1) * oh * ow];
                        let dp = &mut da[plane * h * w..(plane + 1) * h * w];
                        for (oy, (yi, yw)) in yt.iter().enumerate() {
                            for (ox, (xi, xw)) in xt.iter().enumerate() {
                                let gv = gp[oy * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for (ty, &row) in yi.iter().enumerate() {
                                    let wy = yw[ty] * gv;
                                    for (tx, &col) in xi.iter().enumerate() {
                                        dp[row * w + col] += wy * xw[tx];
                                    }
                                }
                            }
                        }
                    }
                    pa.accumulate_grad(&da);
                });
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_partition_of_unity() {
        // For any phase, the four tap weights sum to 1.
        for k in 0..100 {
            let frac = k as f64 / 100.0;
            let sum = kernel(frac + 1.0) + kernel(frac) + kernel(frac - 1.0) + kernel(frac - 2.0);
            assert!((sum - 1.0).abs() < 1e-12, "phase {frac}: {sum}");
        }
    }

    #[test]
    fn kernel_interpolates_at_integers() {
        assert_eq!(kernel(0.0), 1.0);
        assert_eq!(kernel(1.0), 0.0);
        assert_eq!(kernel(2.0), 0.0);
    }

    #[test]
    fn identity_resample_is_exact() {
        let src: Vec<f64> = (0..20).map(|v| v as f64 * 0.37 - 2.0).collect();
        let out = resample_plane_bicubic(&src, 4, 5, 4, 5);
        for (a, b) in src.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_plane_stays_constant() {
        let src = vec![0.75; 64];
        let out = resample_plane_bicubic(&src, 8, 8, 16, 16);
        for v in out {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_ramp_reproduced_away_from_edges() {
        // Catmull-Rom reproduces degree-1 polynomials exactly where no tap
        // clamps; edge rows/cols deviate by design.
        let w = 16;
        let src: Vec<f64> = (0..w * w).map(|i| (i % w) as f64).collect();
        let out = resample_plane_bicubic(&src, w, w, 2 * w, 2 * w);
        for y in 0..2 * w {
            for x in 4..2 * w - 4 {
                let expect = (x as f64 + 0.5) * 0.5 - 0.5;
                let got = out[y * 2 * w + x];
                assert!((got - expect).abs() < 1e-12, "({y},{x}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn integer_shift_equivariance_in_interior() {
        // Shifting the source by one pixel shifts a 2× upsample by two,
        // away from the clamped borders.
        let (h, w) = (10, 10);
        let img: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64).collect();
        let mut shifted = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w - 1 {
                shifted[y * w + x] = img[y * w + x + 1];
            }
            shifted[y * w + w - 1] = img[y * w + w - 1];
        }
        let a = resample_plane_bicubic(&img, h, w, 2 * h, 2 * w);
        let b = resample_plane_bicubic(&shifted, h, w, 2 * h, 2 * w);
        for y in 0..2 * h {
            for x in 4..2 * w - 8 {
                let av = a[y * 2 * w + x + 2];
                let bv = b[y * 2 * w + x];
                assert!((av - bv).abs() < 1e-12, "({y},{x})");
            }
        }
    }
}
