//! Fully connected networks: layers, initialization, forward passes and
//! checkpoints.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, GradTape, Gradients, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    fn on_tape(self, tape: &mut GradTape, z: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(z),
            Activation::Tanh => tape.tanh(z),
            Activation::Identity => Ok(z),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "none" | "linear" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

/// One dense layer `σ(W x + b)` with `W: [n_out × n_in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub n_in: usize,
    pub n_out: usize,
    pub activation: Activation,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LayerSpec {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "weights must be 2-D, got {:?}",
                weights.shape()
            )));
        }
        let (n_out, n_in) = (weights.rows(), weights.cols());
        if bias.len() != n_out {
            return Err(Error::Shape(format!(
                "bias of length {} for {n_out} neurons",
                bias.len()
            )));
        }
        weights.ensure_finite("layer weights")?;
        bias.ensure_finite("layer bias")?;
        let bias = Tensor::new(vec![n_out], bias.into_data())?;
        Ok(Self {
            n_in,
            n_out,
            activation,
            weights,
            bias,
        })
    }

    /// Incoming weight row of neuron `i`.
    pub fn weight_row(&self, i: usize) -> &[f64] {
        self.weights.row(i)
    }

    pub fn weight_row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.n_in;
        &mut self.weights.data_mut()[i * n..(i + 1) * n]
    }

    /// Pre-activations `X Wᵀ + b` for a batch.
    pub fn preactivate(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.n_in {
            return Err(Error::Shape(format!(
                "layer expects {} inputs, batch has shape {:?}",
                self.n_in,
                x.shape()
            )));
        }
        let n = x.rows();
        let mut out = Vec::with_capacity(n * self.n_out);
        let b = self.bias.data();
        for k in 0..n {
            let xr = x.row(k);
            for i in 0..self.n_out {
                out.push(dot(xr, self.weights.row(i)) + b[i]);
            }
        }
        Tensor::matrix(n, self.n_out, out)
    }
}

/// Per-layer pre-activations and activations of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutputs {
    pub preactivations: Vec<Tensor>,
    pub activations: Vec<Tensor>,
}

impl LayerOutputs {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("network has at least one layer")
    }
}

/// Tape handles for one forward pass of an [`MlpNetwork`].
#[derive(Clone, Debug)]
pub struct NetVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub preactivations: Vec<Var>,
    pub activations: Vec<Var>,
}

impl NetVars {
    pub fn output(&self) -> Var {
        *self.activations.last().expect("network has at least one layer")
    }
}

/// Gradient of a scalar with respect to every parameter of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl NetGrads {
    pub fn zeros_like(net: &MlpNetwork) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.n_out]).collect(),
        }
    }

    pub fn from_tape(grads: &mut Gradients, vars: &NetVars) -> Self {
        let take = |g: &mut Gradients, v: &Var| g.take(*v).expect("parameter leaf has a gradient");
        Self {
            weights: vars.weights.iter().map(|v| take(grads, v)).collect(),
            biases: vars.biases.iter().map(|v| take(grads, v)).collect(),
        }
    }

    /// Gradients in the same order as [`MlpNetwork::params`]: per layer,
    /// weights (row-major) then bias.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    /// Flattened copy in [`MlpNetwork::params`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }
}

/// A multilayer perceptron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpNetwork {
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl MlpNetwork {
    pub fn from_layers(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].n_out != pair[1].n_in {
                return Err(Error::Shape(format!(
                    "layer {k} emits {} features but layer {} expects {}",
                    pair[0].n_out,
                    k + 1,
                    pair[1].n_in
                )));
            }
        }
        Ok(Self { layers, seed })
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.n_in())
            .chain(self.layers.iter().map(|l| l.n_out))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.n_out).sum()
    }

    pub fn layer(&self, index: usize) -> Result<&LayerSpec> {
        self.layers.get(index).ok_or(Error::LayerIndex {
            index,
            layers: self.layers.len(),
        })
    }

    /// Hidden layers are all but the last.
    pub fn last_hidden_layer(&self) -> Option<usize> {
        self.layers.len().checked_sub(2)
    }

    /// Plain forward pass, no tape.
    pub fn forward(&self, batch: &Tensor) -> Result<LayerOutputs> {
        batch.ensure_finite("network input")?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = post.last().unwrap_or(batch);
            let z = layer.preactivate(input)?;
            let h = z.map(|v| layer.activation.apply(v));
            pre.push(z);
            post.push(h);
        }
        Ok(LayerOutputs {
            preactivations: pre,
            activations: post,
        })
    }

    /// Network output only.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        batch.ensure_finite("network input")?;
        let mut h = batch.clone();
        for layer in &self.layers {
            let z = layer.preactivate(&h)?;
            h = z.map(|v| layer.activation.apply(v));
        }
        Ok(h)
    }

    /// Input seen by layer `index` (the batch itself for layer 0).
    pub fn layer_input(&self, batch: &Tensor, index: usize) -> Result<Tensor> {
        self.layer(index)?;
        let mut h = batch.clone();
        for layer in &self.layers[..index] {
            let z = layer.preactivate(&h)?;
            h = z.map(|v| layer.activation.apply(v));
        }
        Ok(h)
    }

    /// Records a forward pass on `tape`, registering every parameter as a
    /// differentiable leaf.
    pub fn forward_on_tape(&self, tape: &mut GradTape, input: Var) -> Result<NetVars> {
        let mut vars = NetVars {
            weights: Vec::with_capacity(self.layers.len()),
            biases: Vec::with_capacity(self.layers.len()),
            preactivations: Vec::with_capacity(self.layers.len()),
            activations: Vec::with_capacity(self.layers.len()),
        };
        let mut h = input;
        for layer in &self.layers {
            let w = tape.leaf(layer.weights.clone().with_requires_grad(true))?;
            let b = tape.leaf(layer.bias.clone().with_requires_grad(true))?;
            let z = tape.linear(h, w, Some(b))?;
            h = layer.activation.on_tape(tape, z)?;
            vars.weights.push(w);
            vars.biases.push(b);
            vars.preactivations.push(z);
            vars.activations.push(h);
        }
        Ok(vars)
    }

    /// Gradient of `loss_fn(output)` with respect to all parameters.
    pub fn gradients<F>(&self, batch: &Tensor, loss_fn: F) -> Result<(f64, NetGrads)>
    where
        F: FnOnce(&mut GradTape, Var) -> Result<Var>,
    {
        let mut tape = GradTape::new();
        let x = tape.constant(batch.clone())?;
        let vars = self.forward_on_tape(&mut tape, x)?;
        let loss = loss_fn(&mut tape, vars.output())?;
        let value = tape.scalar(loss);
        let mut g = tape.backward(loss)?;
        Ok((value, NetGrads::from_tape(&mut g, &vars)))
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.data().iter().chain(l.bias.data()))
    }

    /// Applies `f(param, grad)` to every parameter alongside its gradient.
    pub fn zip_params_mut(&mut self, grads: &NetGrads, mut f: impl FnMut(&mut f64, f64)) {
        for (k, layer) in self.layers.iter_mut().enumerate() {
            for (p, g) in layer.weights.data_mut().iter_mut().zip(&grads.weights[k]) {
                f(p, *g);
            }
            for (p, g) in layer.bias.data_mut().iter_mut().zip(&grads.biases[k]) {
                f(p, *g);
            }
        }
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| {
            let LayerSpec { weights, bias, .. } = l;
            weights.data_mut().iter_mut().chain(bias.data_mut().iter_mut())
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }
}

/// Builds an MLP with `widths.len() - 1` layers. Hidden layers use
/// `activation`; the output layer is linear.
///
/// Weights are drawn from `U(-1/√n_in, 1/√n_in)` and biases start at zero,
/// so `h(0) = 0` for zero-anchored activations.
pub fn init_network(widths: &[usize], activation: Activation, seed: u64) -> Result<MlpNetwork> {
    let n = widths.len().saturating_sub(1);
    let mut acts = vec![activation; n];
    if let Some(last) = acts.last_mut() {
        *last = Activation::Identity;
    }
    init_network_with(widths, &acts, seed)
}

/// Like [`init_network`] with an explicit activation per layer.
pub fn init_network_with(
    widths: &[usize],
    activations: &[Activation],
    seed: u64,
) -> Result<MlpNetwork> {
    if widths.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two widths, got {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "widths must be positive, got {widths:?}"
        )));
    }
    if activations.len() != widths.len() - 1 {
        return Err(Error::InvalidArgument(format!(
            "{} activations for {} layers",
            activations.len(),
            widths.len() - 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for (pair, &act) in widths.windows(2).zip(activations) {
        let (n_in, n_out) = (pair[0], pair[1]);
        let bound = 1.0 / (n_in as f64).sqrt();
        let w: Vec<f64> = (0..n_in * n_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        layers.push(LayerSpec {
            n_in,
            n_out,
            activation: act,
            weights: Tensor::matrix(n_out, n_in, w)?,
            bias: Tensor::zeros(vec![n_out]),
        });
    }
    MlpNetwork::from_layers(layers, seed)
}

const CHECKPOINT_FORMAT: &str = "plasticity-mlp-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    n_in: usize,
    n_out: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    seed: u64,
    widths: Vec<usize>,
    layers: Vec<CheckpointLayer>,
}

impl MlpNetwork {
    /// Serializes to the versioned JSON checkpoint format. Floats are written
    /// in shortest round-trip form, so decoding is bit-exact.
    pub fn to_checkpoint(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            widths: self.widths(),
            layers: self
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    n_in: l.n_in,
                    n_out: l.n_out,
                    activation: l.activation,
                    weights: l.weights.data().to_vec(),
                    bias: l.bias.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unexpected format tag {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        let layers = ck
            .layers
            .into_iter()
            .map(|l| {
                LayerSpec::new(
                    Tensor::matrix(l.n_out, l.n_in, l.weights)?,
                    Tensor::new(vec![l.n_out], l.bias)?,
                    l.activation,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let net = MlpNetwork::from_layers(layers, ck.seed)?;
        if net.widths() != ck.widths {
            return Err(Error::Format(format!(
                "widths {:?} disagree with layers {:?}",
                ck.widths,
                net.widths()
            )));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: &[[f64; 2]], act: Activation) -> MlpNetwork {
        let layer = LayerSpec::new(Tensor::from_rows(w), Tensor::zeros(vec![w.len()]), act).unwrap();
        MlpNetwork::from_layers(vec![layer], 0).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = single(&[[1.0, 0.0], [0.0, 1.0]], Activation::Identity);
        let out = net.forward(&Tensor::from_rows(&[[3.0, 4.0]])).unwrap();
        assert_eq!(out.output().data(), &[3.0, 4.0]);
    }

    #[test]
    fn relu_layer_hand_evaluation() {
        let net = single(&[[1.0, 0.0], [-1.0, 0.0]], Activation::Relu);
        let out = net
            .forward(&Tensor::from_rows(&[[1.0, 0.0], [2.0, 0.0]]))
            .unwrap();
        assert_eq!(out.output().data(), &[1.0, 0.0, 2.0, 0.0]);
        assert_eq!(out.preactivations[0].data(), &[1.0, -1.0, 2.0, -2.0]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = init_network(&[3, 4, 2], Activation::Relu, 1).unwrap();
        for p in net.params_mut() {
            *p = 0.0;
        }
        let out = net
            .forward(&Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 9.0]]))
            .unwrap();
        for a in &out.activations {
            assert!(a.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = init_network(&[3, 2], Activation::Relu, 1).unwrap();
        assert!(matches!(
            net.forward(&Tensor::zeros(vec![2, 4])),
            Err(Error::Shape(_))
        ));
        let bad = Tensor::from_rows(&[[1.0, f64::INFINITY, 0.0]]);
        assert!(matches!(net.forward(&bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = init_network(&[17, 64, 64, 1], Activation::Relu, 42).unwrap();
        let b = init_network(&[17, 64, 64, 1], Activation::Relu, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers.len(), 3);
        assert_eq!(a.layers[0].weights.shape(), &[64, 17]);
        assert_eq!(a.layers[1].weights.shape(), &[64, 64]);
        assert_eq!(a.layers[2].weights.shape(), &[1, 64]);
        for l in &a.layers {
            assert!(l.bias.data().iter().all(|&b| b == 0.0));
            let bound = 1.0 / (l.n_in as f64).sqrt();
            assert!(l.weights.data().iter().all(|w| w.abs() <= bound));
        }
        assert_eq!(a.layers[2].activation, Activation::Identity);
        let c = init_network(&[17, 64, 64, 1], Activation::Relu, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_degenerate_widths() {
        assert!(init_network(&[], Activation::Relu, 0).is_err());
        assert!(init_network(&[4], Activation::Relu, 0).is_err());
        assert!(init_network(&[4, 0, 1], Activation::Relu, 0).is_err());
    }

    #[test]
    fn incompatible_layers_rejected() {
        let a = LayerSpec::new(Tensor::zeros(vec![3, 2]), Tensor::zeros(vec![3]), Activation::Relu).unwrap();
        let b = LayerSpec::new(Tensor::zeros(vec![1, 4]), Tensor::zeros(vec![1]), Activation::Relu).unwrap();
        assert!(MlpNetwork::from_layers(vec![a, b], 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = init_network(&[5, 7, 3], Activation::Tanh, 9).unwrap();
        let text = net.to_checkpoint().unwrap();
        let back = MlpNetwork::from_checkpoint(&text).unwrap();
        assert_eq!(net, back);
        for (a, b) in net.params().zip(back.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let bumped = text.replace("\"version\": 1", "\"version\": 99");
        assert!(MlpNetwork::from_checkpoint(&bumped).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let net = init_network(&[4, 6, 5, 2], Activation::Relu, 3).unwrap();
        let x = Tensor::from_rows(&[[0.1, -0.4, 2.0, 1.0], [-1.0, 0.3, 0.2, 0.0]]);
        let plain = net.forward(&x).unwrap();
        let mut tape = GradTape::new();
        let xv = tape.constant(x).unwrap();
        let vars = net.forward_on_tape(&mut tape, xv).unwrap();
        for (k, a) in plain.activations.iter().enumerate() {
            assert_eq!(tape.value(vars.activations[k]), a);
        }
    }
}
