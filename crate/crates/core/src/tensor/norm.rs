//! Group normalization. Instance norm is the per-channel special case.

use crate::error::{CoreError, Result};

use super::Tensor;

impl Tensor {
    /// Normalizes each (sample, group) slice of an NCHW tensor to zero mean
    /// and unit variance, then applies optional per-channel affine weights.
    /// `gamma`/`beta` are `(C)`-shaped; passing `None` keeps the norm
    /// parameter-free.
    pub fn group_norm(
        &self,
        groups: usize,
        gamma: Option<&Tensor>,
        beta: Option<&Tensor>,
        eps: f64,
    ) -> Result<Tensor> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(CoreError::invalid("group_norm", format!("expected NCHW, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if groups == 0 || c % groups != 0 {
            return Err(CoreError::invalid(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        if eps <= 0.0 {
            return Err(CoreError::invalid("group_norm", "eps must be positive"));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if let Some(p) = p {
                if p.shape() != [c] {
                    return Err(CoreError::invalid(
                        "group_norm",
                        format!("{name} must have shape [{c}], got {:?}", p.shape()),
                    ));
                }
            }
        }

        let cg = c / groups; // channels per group
        let m = cg * h * w; // elements per (sample, group)
        let hw = h * w;

        let mut normalized = vec![0.0; self.numel()];
        let mut inv_stds = vec![0.0; n * groups];
        self.with_data(|x| {
            for ni in 0..n {
                for gi in 0..groups {
                    let base = (ni * c + gi * cg) * hw;
                    let slice = &x[base..base + m];
                    let mean = slice.iter().sum::<f64>() / m as f64;
                    let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    inv_stds[ni * groups + gi] = inv;
                    for (o, &v) in normalized[base..base + m].iter_mut().zip(slice) {
                        *o = (v - mean) * inv;
                    }
                }
            }
        });

        let mut data = normalized.clone();
        if gamma.is_some() || beta.is_some() {
            let gv = gamma.map(|g| g.to_vec());
            let bv = beta.map(|b| b.to_vec());
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let scale = gv.as_ref().map_or(1.0, |g| g[ci]);
                    let shift = bv.as_ref().map_or(0.0, |b| b[ci]);
                    for v in &mut data[base..base + hw] {
                        *v = *v * scale + shift;
                    }
                }
            }
        }

        let px = self.clone();
        let pg = gamma.cloned();
        let pb = beta.cloned();
        let mut parents = vec![self.clone()];
        parents.extend(gamma.cloned());
        parents.extend(beta.cloned());
        Tensor::from_op("group_norm", s.clone(), data, parents, move || {
            Box::new(move |out: &Tensor| {
                out.grad_ref(|g| {
                    // Affine grads first; then the normalization adjoint:
                    // dx = inv · (dx̂ − mean(dx̂) − x̂ · mean(dx̂ ⊙ x̂)) per group.
                    if let Some(gt) = &pg {
                        let mut dgamma = vec![0.0; c];
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * hw;
                                dgamma[ci] += g[base..base + hw]
                                    .iter()
                                    .zip(&normalized[base..base + hw])
                                    .map(|(gv, xv)| gv * xv)
                                    .sum::<f64>();
                            }
                        }
                        gt.accumulate_grad(&dgamma);
                    }
                    if let Some(bt) = &pb {
                        let mut dbeta = vec![0.0; c];
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * hw;
                                dbeta[ci] += g[base..base + hw].iter().sum::<f64>();
                            }
                        }
                        bt.accumulate_grad(&dbeta);
                    }

                    let gamma_vals = pg.as_ref().map(|t| t.to_vec());
                    let mut dx = vec![0.0; g.len()];
                    for ni in 0..n {
                        for gi in 0..groups {
                            let base = (ni * c + gi * cg) * hw;
                            let inv = inv_stds[ni * groups + gi];
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for ci_off in 0..cg {
                                let ci = gi * cg + ci_off;
                                let scale = gamma_vals.as_ref().map_or(1.0, |gv| gv[ci]);
                                let row = base + ci_off * hw;
                                for i in row..row + hw {
                                    let dxhat = g[i] * scale;
                                    sum_dxhat += dxhat;
                                    sum_dxhat_xhat += dxhat * normalized[i];
                                }
                            }
                            let mean_dxhat = sum_dxhat / m as f64;
                            let mean_dxhat_xhat = sum_dxhat_xhat / m as f64;
                            for ci_off in 0..cg {
                                let ci = gi * cg + ci_off;
                                let scale = gamma_vals.as_ref().map_or(1.0, |gv| gv[ci]);
                                let row = base + ci_off * hw;
                                for i in row..row + hw {
                                    let dxhat = g[i] * scale;
                                    dx[i] = inv * (dxhat - mean_dxhat - normalized[i] * mean_dxhat_xhat);
                                }
                            }
                        }
                    }
                    px.accumulate_grad(&dx);
                });
            })
        })
    }

    /// Parameter-free instance normalization: one group per channel, no
    /// affine. Used as the backbone of spatially-adaptive modulation.
    pub fn instance_norm(&self, eps: f64) -> Result<Tensor> {
        let c = *self
            .shape()
            .get(1)
            .ok_or_else(|| CoreError::invalid("instance_norm", "expected NCHW input"))?;
        self.group_norm(c, None, None, eps)
    }
}
