//! 2D convolution (im2col + matmul) and nearest-neighbour upsampling.

use crate::error::{CoreError, Result};

use super::ops::{mm_nn, mm_nt, mm_tn};
use super::Tensor;

/// floor((in + 2·pad − k) / stride) + 1
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(CoreError::invalid(
            "conv2d",
            format!("kernel {k} exceeds padded extent {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    // col is (c_in·kh·kw, ho·wo)
    let out_hw = ho * wo;
    for ci in 0..c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * out_hw;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = row + oy * wo;
                    if iy < 0 || iy >= h as isize {
                        col[dst..dst + wo].fill(0.0);
                        continue;
                    }
                    let src_row = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        col[dst + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            plane[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(
    col: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let out_hw = ho * wo;
    for ci in 0..c_in {
        let plane_base = ci * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * out_hw;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = plane_base + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[dst_row + ix as usize] += col[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2D convolution: x(N,Cin,H,W) ⋆ w(Cout,Cin,kh,kw) (+ bias(Cout)),
    /// zero padding, floor output extents.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        if stride == 0 {
            return Err(CoreError::invalid("conv2d", "stride must be positive"));
        }
        let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(CoreError::ShapeMismatch {
                    op: "conv2d",
                    left: vec![c_out],
                    right: b.shape().to_vec(),
                });
            }
        }
        let ho = conv_out_extent(h, kh, stride, pad)?;
        let wo = conv_out_extent(w, kw, stride, pad)?;
        let k = c_in * kh * kw;
        let out_hw = ho * wo;

        let mut data = vec![0.0; n * c_out * out_hw];
        let mut col = vec![0.0; k * out_hw];
        self.with_data(|x| {
            weight.with_data(|wm| {
                for ni in 0..n {
                    im2col(&x[ni * c_in * h * w..], c_in, h, w, kh, kw, stride, pad, ho, wo, &mut col);
                    mm_nn(wm, &col, c_out, k, out_hw, &mut data[ni * c_out * out_hw..(ni + 1) * c_out * out_hw]);
                }
            })
        });
        if let Some(b) = bias {
            b.with_data(|bv| {
                for ni in 0..n {
                    for co in 0..c_out {
                        let base = (ni * c_out + co) * out_hw;
                        let add = bv[co];
                        for v in &mut data[base..base + out_hw] {
                            *v += add;
                        }
                    }
                }
            });
        }

        let px = self.clone();
        let pw = weight.clone();
        let pb = bias.cloned();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op("conv2d", vec![n, c_out, ho, wo], data, parents, move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    let mut dw = vec![0.0; c_out * k];
                    let mut dx = vec![0.0; n * c_in * h * w];
                    let mut col = vec![0.0; k * out_hw];
                    let mut dcol = vec![0.0; k * out_hw];
                    px.with_data(|x| {
                        pw.with_data(|wm| {
                            for ni in 0..n {
                                let gout = &g[ni * c_out * out_hw..(ni + 1) * c_out * out_hw];
                                // weight grad: dW += dOut · colᵀ (recompute col per sample)
                                im2col(&x[ni * c_in * h * w..], c_in, h, w, kh, kw, stride, pad, ho, wo, &mut col);
                                mm_nt(gout, &col, c_out, out_hw, k, &mut dw);
                                // input grad: dcol = Wᵀ · dOut, then scatter
                                dcol.fill(0.0);
                                mm_tn(wm, gout, c_out, k, out_hw, &mut dcol);
                                col2im_add(
                                    &dcol,
                                    c_in,
                                    h,
                                    w,
                                    kh,
                                    kw,
                                    stride,
                                    pad,
                                    ho,
                                    wo,
                                    &mut dx[ni * c_in * h * w..(ni + 1) * c_in * h * w],
                                );
                            }
                        })
                    });
                    px.accumulate_grad(&dx);
                    pw.accumulate_grad(&dw);
                    if let Some(b) = &pb {
                        let mut db = vec![0.0; c_out];
                        for ni in 0..n {
                            for co in 0..c_out {
                                let base = (ni * c_out + co) * out_hw;
                                db[co] += g[base..base + out_hw].iter().sum::<f64>();
                            }
                        }
                        b.accumulate_grad(&db);
                    }
                });
            })
        })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(CoreError::invalid("upsample_nearest", format!("expected NCHW, got {s:?}")));
        }
        if factor == 0 {
            return Err(CoreError::invalid("upsample_nearest", "factor must be positive"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![0.0; n * c * oh * ow];
        self.with_data(|x| {
            for plane in 0..n * c {
                let src = &x[plane * h * w..(plane + 1) * h * w];
                let dst = &mut data[plane * oh * ow..(plane + 1) * oh * ow];
                for oy in 0..oh {
                    let sy = oy / factor;
                    for ox in 0..ow {
                        dst[oy * ow + ox] = src[sy * w + ox / factor];
                    }
                }
            }
        });
        let pa = self.clone();
        Tensor::from_op("upsample_nearest", vec![n, c, oh, ow], data, vec![self.clone()], move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    let mut da = vec![0.0; n * c * h * w];
                    for plane in 0..n * c {
                        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                        let dst = &mut da[plane * h * w..(plane + 1) * h * w];
                        for oy in 0..oh {
                            let sy = oy / factor;
                            for ox in 0..ow {
                                dst[sy * w + ox / factor] += src[oy * ow + ox];
                            }
                        }
                    }
                    pa.accumulate_grad(&da);
                });
            })
        })
    }
}
