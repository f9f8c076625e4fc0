use serde::{Deserialize, Serialize};

use super::fraction;
use crate::autodiff::GradTape;
use crate::error::{Error, Result};
use crate::nn::{Activation, MlpNetwork};
use crate::tensor::Tensor;

/// Which layer output the gradient-intensity target sums.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MagiTarget {
    /// `S = Σ σ(X Wᵀ + b)`, the layer's activations.
    #[default]
    Post,
    /// `S = Σ (X Wᵀ + b)`.
    Pre,
}

/// Mean absolute gradient intensity of each neuron in one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientIntensityReport {
    pub layer_index: usize,
    pub magi: Vec<f64>,
    pub zero_grad_mask: Vec<bool>,
    pub zero_grad_fraction: f64,
    pub tau_g: f64,
}

impl GradientIntensityReport {
    pub fn zero_grad_indices(&self) -> Vec<usize> {
        super::mask_indices(&self.zero_grad_mask)
    }
}

/// MAGI of layer `layer_index` with the post-activation target.
pub fn magi(
    net: &MlpNetwork,
    batch: &Tensor,
    layer_index: usize,
    tau_g: f64,
) -> Result<GradientIntensityReport> {
    magi_with_target(net, batch, layer_index, tau_g, MagiTarget::Post)
}

/// `G_i = (1/n_in) Σ_j |∂S/∂w_ij|` where `S` sums the layer output over the
/// batch and all neurons. Bias gradients are not included.
pub fn magi_with_target(
    net: &MlpNetwork,
    batch: &Tensor,
    layer_index: usize,
    tau_g: f64,
    target: MagiTarget,
) -> Result<GradientIntensityReport> {
    let layer = net.layer(layer_index)?;
    if batch.rows() == 0 || batch.is_empty() {
        return Err(Error::InvalidArgument("MAGI needs a nonempty batch".into()));
    }
    let input = net.layer_input(batch, layer_index)?;

    let mut tape = GradTape::new();
    let x = tape.constant(input)?;
    let w = tape.leaf(layer.weights.clone().with_requires_grad(true))?;
    let b = tape.constant(layer.bias.clone())?;
    let z = tape.linear(x, w, Some(b))?;
    let y = match (target, layer.activation) {
        (MagiTarget::Pre, _) | (MagiTarget::Post, Activation::Identity) => z,
        (MagiTarget::Post, Activation::Relu) => tape.relu(z)?,
        (MagiTarget::Post, Activation::Tanh) => tape.tanh(z)?,
    };
    let s = tape.sum(y)?;
    let grads = tape.backward(s)?;
    let dw = grads.get(w).expect("weights are a differentiable leaf");

    let n_in = layer.n_in as f64;
    let magi: Vec<f64> = dw
        .chunks(layer.n_in)
        .map(|row| row.iter().map(|g| g.abs()).sum::<f64>() / n_in)
        .collect();
    let zero_grad_mask: Vec<bool> = magi.iter().map(|&g| g <= tau_g).collect();
    Ok(GradientIntensityReport {
        layer_index,
        zero_grad_fraction: fraction(&zero_grad_mask),
        magi,
        zero_grad_mask,
        tau_g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_network, LayerSpec};

    fn single(w: Tensor, b: Vec<f64>, act: Activation) -> MlpNetwork {
        let n = b.len();
        let layer = LayerSpec::new(w, Tensor::new(vec![n], b).unwrap(), act).unwrap();
        MlpNetwork::from_layers(vec![layer], 0).unwrap()
    }

    #[test]
    fn identity_layer_magi_is_mean_column_sum() {
        let net = single(
            Tensor::from_rows(&[[0.3, -2.0], [1.0, 1.0], [5.0, 0.1]]),
            vec![0.0, 1.0, -1.0],
            Activation::Identity,
        );
        let r = magi(&net, &Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]), 0, 1e-8).unwrap();
        assert_eq!(r.magi, vec![5.0, 5.0, 5.0]);
        assert_eq!(r.zero_grad_fraction, 0.0);
    }

    #[test]
    fn zero_batch_gives_zero_magi() {
        let net = init_network(&[3, 4], Activation::Identity, 2).unwrap();
        let r = magi(&net, &Tensor::zeros(vec![5, 3]), 0, 1e-8).unwrap();
        assert!(r.magi.iter().all(|&g| g == 0.0));
        assert_eq!(r.zero_grad_fraction, 1.0);
    }

    #[test]
    fn dead_relu_neuron_has_zero_magi() {
        let net = single(
            Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]),
            vec![0.0, -0.5],
            Activation::Relu,
        );
        let r = magi(&net, &Tensor::from_rows(&[[1.0, 0.0], [2.0, 0.5]]), 0, 0.0).unwrap();
        assert_eq!(r.magi[1], 0.0);
        assert!(r.magi[0] > 0.0);
        assert_eq!(r.zero_grad_mask, vec![false, true]);
        // Pre-activation target ignores the ReLU gate.
        let pre = magi_with_target(
            &net,
            &Tensor::from_rows(&[[1.0, 0.0], [2.0, 0.5]]),
            0,
            0.0,
            MagiTarget::Pre,
        )
        .unwrap();
        assert!(pre.magi[1] > 0.0);
    }

    #[test]
    fn invalid_layer_index() {
        let net = init_network(&[3, 4, 1], Activation::Relu, 2).unwrap();
        assert!(matches!(
            magi(&net, &Tensor::zeros(vec![1, 3]), 2, 0.0),
            Err(Error::LayerIndex { .. })
        ));
    }

    #[test]
    fn deeper_layer_uses_forwarded_input() {
        let net = init_network(&[3, 4, 2], Activation::Identity, 11).unwrap();
        let x = Tensor::from_rows(&[[1.0, -1.0, 0.5], [0.2, 0.3, 0.4]]);
        let r = magi(&net, &x, 1, 0.0).unwrap();
        let h = net.layer_input(&x, 1).unwrap();
        let col_abs_mean: f64 = (0..4)
            .map(|j| (h.get(0, j) + h.get(1, j)).abs())
            .sum::<f64>()
            / 4.0;
        for g in r.magi {
            assert!((g - col_abs_mean).abs() < 1e-14);
        }
    }
}
