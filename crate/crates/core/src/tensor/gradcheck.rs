//! Central finite-difference verification of reverse-mode gradients.
//!
//! The harness rebuilds the computation from scratch for every probe, so it
//! exercises exactly what a training step sees. For large inputs it checks a
//! seeded subsample of coordinates; small inputs are checked exhaustively.

use rand::seq::index::sample;

use crate::error::{CoreError, Result};
use crate::rng::rng_from_seed;

use super::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Max coordinates probed per input tensor; others are skipped via a
    /// seeded subsample so the check stays affordable on composite models.
    pub max_coords: usize,
    pub seed: u64,
    /// Floor on the relative-error denominator, so near-zero gradients are
    /// compared absolutely.
    pub denom_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_coords: 200,
            seed: 0x67ad_c0de,
            denom_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    /// max over probed coordinates of |g_ad − g_fd| / max(|g_ad|, |g_fd|, floor)
    pub max_rel: f64,
    pub coords_checked: usize,
}

/// Checks the reverse-mode gradient of `f` (a scalar-valued function of the
/// given leaf tensors) against central differences.
pub fn grad_check<F>(
    inits: &[(Vec<f64>, Vec<usize>)],
    f: F,
    cfg: &GradCheckConfig,
) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if inits.is_empty() {
        return Err(CoreError::invalid("grad_check", "no inputs"));
    }

    // Analytic pass.
    let leaves: Vec<Tensor> = inits
        .iter()
        .map(|(data, shape)| Tensor::param(data.clone(), shape))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(CoreError::invalid("grad_check", "objective must be scalar"));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    // Probe coordinates per input.
    let mut rng = rng_from_seed(cfg.seed);
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let consts: Vec<Tensor> = values
            .iter()
            .zip(inits)
            .map(|(data, (_, shape))| Tensor::from_vec(data.clone(), shape))
            .collect::<Result<_>>()?;
        f(&consts)?.item()
    };

    let mut values: Vec<Vec<f64>> = inits.iter().map(|(d, _)| d.clone()).collect();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (i, grads) in analytic.iter().enumerate() {
        let numel = grads.len();
        let coords: Vec<usize> = if numel <= cfg.max_coords {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, cfg.max_coords).into_vec()
        };
        for &ci in &coords {
            let orig = values[i][ci];
            values[i][ci] = orig + cfg.step;
            let plus = eval(&values)?;
            values[i][ci] = orig - cfg.step;
            let minus = eval(&values)?;
            values[i][ci] = orig;

            let fd = (plus - minus) / (2.0 * cfg.step);
            let ad = grads[ci];
            let denom = ad.abs().max(fd.abs()).max(cfg.denom_floor);
            let rel = (ad - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradReport {
        max_rel,
        coords_checked: checked,
    })
}

/// `grad_check` that fails with a named error when the tolerance is missed.
pub fn require_grad_check<F>(
    case: &str,
    inits: &[(Vec<f64>, Vec<usize>)],
    f: F,
    tolerance: f64,
    cfg: &GradCheckConfig,
) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let report = grad_check(inits, f, cfg)?;
    if report.max_rel > tolerance {
        return Err(CoreError::GradCheckFailed {
            case: case.to_string(),
            max_rel: report.max_rel,
            tolerance,
        });
    }
    Ok(report)
}
