//! Training and instrumentation toolkit for studying plasticity loss in
//! small neural networks.
//!
//! The crate bundles a reverse-mode autodiff engine over dense matrices,
//! multilayer perceptrons, the dormancy index and mean absolute gradient
//! intensity (MAGI) metrics with a checker for their equivalence on ReLU
//! layers, synthetic regression tasks, supervised training with metric
//! hooks, a small PPO implementation on a point-mass environment, and the
//! experiment harness that ties them together.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod ppo;
pub mod tasks;
pub mod tensor;
pub mod trace;
pub mod train;

pub use autodiff::{GradTape, Gradients, Var};
pub use error::{Error, Result};
pub use nn::{init_network, Activation, LayerOutputs, LayerSpec, MlpNetwork, NetGrads};
pub use tensor::Tensor;
