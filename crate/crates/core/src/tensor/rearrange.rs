//! Lossless pixel-shuffle rearrangements between space and channels.
//!
//! Channel layout: block offsets are minor, so source channel `c` lands in
//! output channels `c·f² + dy·f + dx`. `depth_to_space` applies the exact
//! inverse permutation; a round trip is bit-identical.

use crate::error::{CoreError, Result};

use super::Tensor;

/// (n,c,h,w) → (n,c·f²,h/f,w/f) on raw storage.
fn s2d_raw(x: &[f64], n: usize, c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow, oc) = (h / f, w / f, c * f * f);
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..f {
                for dx in 0..f {
                    let co = ci * f * f + dy * f + dx;
                    for y in 0..oh {
                        let src_row = ((ni * c + ci) * h + y * f + dy) * w;
                        let dst_row = ((ni * oc + co) * oh + y) * ow;
                        for x_i in 0..ow {
                            out[dst_row + x_i] = x[src_row + x_i * f + dx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// (n,c,h,w) → (n,c/f²,h·f,w·f) on raw storage; inverse of `s2d_raw`.
fn d2s_raw(x: &[f64], n: usize, c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow, oc) = (h * f, w * f, c / (f * f));
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let co = ci / (f * f);
            let rem = ci % (f * f);
            let (dy, dx) = (rem / f, rem % f);
            for y in 0..h {
                let src_row = ((ni * c + ci) * h + y) * w;
                let dst_row = ((ni * oc + co) * oh + y * f + dy) * ow;
                for x_i in 0..w {
                    out[dst_row + x_i * f + dx] = x[src_row + x_i];
                }
            }
        }
    }
    out
}

impl Tensor {
    /// (N,C,H,W) → (N,C·f²,H/f,W/f). Extents must divide evenly.
    pub fn space_to_depth(&self, f: usize) -> Result<Tensor> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(CoreError::invalid("space_to_depth", format!("expected NCHW, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(CoreError::invalid(
                "space_to_depth",
                format!("factor {f} does not divide extents {h}×{w}"),
            ));
        }
        let data = self.with_data(|x| s2d_raw(x, n, c, h, w, f));
        let pa = self.clone();
        Tensor::from_op(
            "space_to_depth",
            vec![n, c * f * f, h / f, w / f],
            data,
            vec![self.clone()],
            move || {
                Box::new(move |out: &Tensor| {
                    out.grad_ref(|g| {
                        let da = d2s_raw(g, n, c * f * f, h / f, w / f, f);
                        pa.accumulate_grad(&da);
                    });
                })
            },
        )
    }

    /// (N,C,H,W) → (N,C/f²,H·f,W·f). Channel count must divide by f².
    pub fn depth_to_space(&self, f: usize) -> Result<Tensor> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(CoreError::invalid("depth_to_space", format!("expected NCHW, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if f == 0 || c % (f * f) != 0 {
            return Err(CoreError::invalid(
                "depth_to_space",
                format!("factor {f}² does not divide {c} channels"),
            ));
        }
        let data = self.with_data(|x| d2s_raw(x, n, c, h, w, f));
        let pa = self.clone();
        Tensor::from_op(
            "depth_to_space",
            vec![n, c / (f * f), h * f, w * f],
            data,
            vec![self.clone()],
            move || {
                Box::new(move |out: &Tensor| {
                    out.grad_ref(|g| {
                        let da = s2d_raw(g, n, c / (f * f), h * f, w * f, f);
                        pa.accumulate_grad(&da);
                    });
                })
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn known_layout_for_factor_two() {
        // One 4×4 channel: the four phase grids become four 2×2 channels.
        let x = Tensor::from_vec((0..16).map(|v| v as f64).collect(), &[1, 1, 4, 4]).unwrap();
        let y = x.space_to_depth(2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 2, 2]);
        let v = y.to_vec();
        assert_eq!(&v[0..4], &[0.0, 2.0, 8.0, 10.0]); // (dy=0,dx=0)
        assert_eq!(&v[4..8], &[1.0, 3.0, 9.0, 11.0]); // (dy=0,dx=1)
        assert_eq!(&v[8..12], &[4.0, 6.0, 12.0, 14.0]); // (dy=1,dx=0)
        assert_eq!(&v[12..16], &[5.0, 7.0, 13.0, 15.0]); // (dy=1,dx=1)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut rng = rng_from_seed(5);
        let x = Tensor::randn(&mut rng, &[2, 3, 8, 8]);
        let back = x.space_to_depth(4).unwrap().depth_to_space(4).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn indivisible_extent_rejected() {
        let x = Tensor::zeros(&[1, 1, 6, 6]);
        assert!(x.space_to_depth(4).is_err());
        let y = Tensor::zeros(&[1, 6, 2, 2]);
        assert!(y.depth_to_space(2).is_err());
    }

    #[test]
    fn gradient_is_the_inverse_permutation() {
        let x = Tensor::param((0..16).map(|v| v as f64).collect(), &[1, 1, 4, 4]).unwrap();
        let y = x.space_to_depth(2).unwrap();
        // Weighted sum picks out one element; its grad lands exactly at the
        // source location of that element.
        let mut wts = vec![0.0; 16];
        wts[5] = 1.0; // channel 1 (dy=0,dx=1), position (0,1) → source (0, 3)
        y.weighted_sum(&wts).unwrap().backward().unwrap();
        let g = x.grad().unwrap();
        let mut expect = vec![0.0; 16];
        expect[3] = 1.0;
        assert_eq!(g, expect);
    }
}
