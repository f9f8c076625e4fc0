use serde::{Deserialize, Serialize};

use crate::nn::MlpNetwork;

/// Summary moments of a parameter block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub l2_norm: f64,
    pub max_abs: f64,
}

impl Moments {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: 0.0,
                std: 0.0,
                l2_norm: 0.0,
                max_abs: 0.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            l2_norm: values.iter().map(|v| v * v).sum::<f64>().sqrt(),
            max_abs: values.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub layer_index: usize,
    pub weights: Moments,
    pub bias: Moments,
}

pub fn weight_stats(net: &MlpNetwork) -> Vec<WeightStats> {
    net.layers
        .iter()
        .enumerate()
        .map(|(k, l)| WeightStats {
            layer_index: k,
            weights: Moments::of(l.weights.data()),
            bias: Moments::of(l.bias.data()),
        })
        .collect()
}
