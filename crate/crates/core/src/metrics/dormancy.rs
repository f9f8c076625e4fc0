use serde::{Deserialize, Serialize};

use super::fraction;
use crate::error::{Error, Result};
use crate::nn::MlpNetwork;
use crate::tensor::Tensor;

/// Layer-mean activity below this is treated as a degenerate (fully silent)
/// layer.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Per-neuron dormancy index of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DormancyReport {
    pub layer_index: usize,
    /// Mean absolute activation of each neuron over the batch.
    pub mean_abs: Vec<f64>,
    /// `mean_abs[i]` divided by the layer average of `mean_abs`.
    pub scores: Vec<f64>,
    pub dormant_mask: Vec<bool>,
    pub dormant_fraction: f64,
    pub batch_size: usize,
    pub tau_d: f64,
    /// The layer average was below [`DENOMINATOR_FLOOR`]; every score is 0.
    pub degenerate: bool,
}

impl DormancyReport {
    pub fn dormant_indices(&self) -> Vec<usize> {
        super::mask_indices(&self.dormant_mask)
    }
}

/// Dormancy index from a `[n_batch × H]` activation matrix.
pub fn dormancy_index(layer_index: usize, activations: &Tensor, tau_d: f64) -> Result<DormancyReport> {
    if activations.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "activations must be [batch × neurons], got {:?}",
            activations.shape()
        )));
    }
    let (n, h) = (activations.rows(), activations.cols());
    if n == 0 {
        return Err(Error::InvalidArgument("dormancy needs a nonempty batch".into()));
    }
    if !(tau_d >= 0.0) {
        return Err(Error::InvalidArgument(format!("tau_d must be >= 0, got {tau_d}")));
    }
    let mut mean_abs = vec![0.0; h];
    for k in 0..n {
        for (m, v) in mean_abs.iter_mut().zip(activations.row(k)) {
            *m += v.abs();
        }
    }
    for m in &mut mean_abs {
        *m /= n as f64;
    }
    let denom = mean_abs.iter().sum::<f64>() / h as f64;
    let degenerate = !(denom >= DENOMINATOR_FLOOR);
    let scores: Vec<f64> = if degenerate {
        vec![0.0; h]
    } else {
        mean_abs.iter().map(|m| m / denom).collect()
    };
    let dormant_mask: Vec<bool> = scores.iter().map(|&s| s <= tau_d).collect();
    Ok(DormancyReport {
        layer_index,
        dormant_fraction: fraction(&dormant_mask),
        mean_abs,
        scores,
        dormant_mask,
        batch_size: n,
        tau_d,
        degenerate,
    })
}

/// Dormancy reports for every layer of `net` on `batch`.
pub fn dormancy_reports(net: &MlpNetwork, batch: &Tensor, tau_d: f64) -> Result<Vec<DormancyReport>> {
    let out = net.forward(batch)?;
    out.activations
        .iter()
        .enumerate()
        .map(|(l, a)| dormancy_index(l, a, tau_d))
        .collect()
}
