use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spectrum-based rank measures of a feature matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankStats {
    pub layer_index: usize,
    /// Descending, nonnegative.
    pub singular_values: Vec<f64>,
    /// Number of singular values above `delta * σ_max`.
    pub threshold_rank: usize,
    /// `exp(H(p))` with `p_i = σ_i / Σσ`. Zero for the zero matrix.
    pub effective_rank: f64,
    pub delta: f64,
}

pub fn rank_stats(layer_index: usize, features: &Tensor, delta: f64) -> Result<RankStats> {
    if features.shape().len() != 2 || features.rows() == 0 {
        return Err(Error::Shape(format!(
            "rank needs a nonempty matrix, got {:?}",
            features.shape()
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    features.ensure_finite("rank features")?;
    let sv = singular_values(features);
    let smax = sv.first().copied().unwrap_or(0.0);
    let threshold_rank = if smax > 0.0 {
        sv.iter().filter(|&&s| s > delta * smax).count()
    } else {
        0
    };
    let total: f64 = sv.iter().sum();
    let effective_rank = if total > 0.0 {
        let h: f64 = sv
            .iter()
            .filter(|&&s| s > 0.0)
            .map(|&s| {
                let p = s / total;
                -p * p.ln()
            })
            .sum();
        h.exp()
    } else {
        0.0
    };
    Ok(RankStats {
        layer_index,
        singular_values: sv,
        threshold_rank,
        effective_rank,
        delta,
    })
}

/// Singular values in descending order, via one-sided Jacobi rotations.
pub fn singular_values(a: &Tensor) -> Vec<f64> {
    let (m, n) = (a.rows(), a.cols());
    // Orthogonalize the columns of the taller orientation; `cols[j]` holds
    // column j contiguously.
    let mut cols: Vec<Vec<f64>> = if m >= n {
        let mut c = vec![vec![0.0; m]; n];
        for i in 0..m {
            for (j, v) in a.row(i).iter().enumerate() {
                c[j][i] = *v;
            }
        }
        c
    } else {
        (0..m).map(|i| a.row(i).to_vec()).collect()
    };
    let ncols = cols.len();

    const EPS: f64 = 1e-15;
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..ncols {
            for q in p + 1..ncols {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        al += x * x;
                        be += y * y;
                        ga += x * y;
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                let (cp, cq) = (&mut lo[p], &mut hi[0]);
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xv, yv) = (*x, *y);
                    *x = c * xv - s * yv;
                    *y = s * xv + c * yv;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}
