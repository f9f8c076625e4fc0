//! Optimizers, learning-rate schedules and the MSE loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{MlpNetwork, NetGrads};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Decays linearly from the base rate at step 0 to exactly 0 at the
    /// final step.
    LinearAnneal,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total_steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::LinearAnneal => {
                if total_steps <= 1 {
                    return if step == 0 && total_steps == 1 { base } else { 0.0 };
                }
                let last = (total_steps - 1) as f64;
                let frac = (last - step.min(total_steps - 1) as f64) / last;
                base * frac
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Decoupled decay: each step multiplies parameters by `1 - lr * decay`.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip_norm: Option<f64>,
    /// Per-entry bound applied to every parameter after the update.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_clip_bound: Option<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 0.0,
            grad_clip_norm: None,
            weight_clip_bound: None,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("grad_clip_norm", self.grad_clip_norm),
            ("weight_clip_bound", self.weight_clip_bound),
        ] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")));
                }
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Optimizer with its running state. The state is a flat vector over the
/// parameters in the order they are presented, so one optimizer can drive
/// several networks (plus free parameters) as a single parameter set.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    /// Number of completed updates.
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// What a call to [`Optimizer::step`] did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub learning_rate: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    /// Applies one update with learning rate `lr` to `params` (which must
    /// yield exactly `grads.len()` entries): global-norm gradient clipping,
    /// decoupled weight decay, the SGD or Adam rule, then per-entry weight
    /// clipping. Non-finite gradients abort before anything is modified.
    pub fn step_flat<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut f64>,
        grads: &[f64],
        lr: f64,
    ) -> Result<StepInfo> {
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradients".into()));
        }
        if self.t > 0 && self.m.len() != grads.len() && self.config.kind == OptimizerKind::Adam {
            return Err(Error::Shape(format!(
                "optimizer state has {} entries, gradient has {}",
                self.m.len(),
                grads.len()
            )));
        }
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let mut scale = 1.0;
        let mut clipped = false;
        if let Some(max) = self.config.grad_clip_norm {
            if norm > max {
                scale = max / (norm + 1e-12);
                clipped = true;
            }
        }
        let decay = 1.0 - lr * self.config.weight_decay;
        let apply_decay = self.config.weight_decay != 0.0;
        let bound = self.config.weight_clip_bound;
        self.t += 1;
        let mut count = 0;

        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.zip(grads) {
                    if apply_decay {
                        *p *= decay;
                    }
                    *p -= lr * scale * g;
                    if let Some(b) = bound {
                        *p = p.clamp(-b, b);
                    }
                    count += 1;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
                if self.m.is_empty() {
                    self.m = vec![0.0; grads.len()];
                    self.v = vec![0.0; grads.len()];
                }
                let bc1 = 1.0 - b1.powi(self.t as i32);
                let bc2 = 1.0 - b2.powi(self.t as i32);
                for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    let g = g * scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    if apply_decay {
                        *p *= decay;
                    }
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    if let Some(b) = bound {
                        *p = p.clamp(-b, b);
                    }
                    count += 1;
                }
            }
        }
        if count != grads.len() {
            return Err(Error::Shape(format!(
                "optimizer received {count} parameters for {} gradients",
                grads.len()
            )));
        }
        Ok(StepInfo {
            learning_rate: lr,
            grad_norm: norm,
            clipped,
        })
    }

    /// [`Optimizer::step_flat`] over the parameters of one network.
    pub fn step_with_lr(&mut self, net: &mut MlpNetwork, grads: &NetGrads, lr: f64) -> Result<StepInfo> {
        let flat = grads.to_flat();
        if flat.len() != net.num_params() {
            return Err(Error::Shape("gradient does not match network".into()));
        }
        self.step_flat(net.params_mut(), &flat, lr)
    }

    /// Learning rate the schedule gives at `step` of `total_steps`.
    pub fn rate(&self, step: usize, total_steps: usize) -> f64 {
        self.config
            .lr_schedule
            .rate(self.config.learning_rate, step, total_steps)
    }

    /// [`Optimizer::step_with_lr`] at the configured schedule's rate.
    pub fn step(
        &mut self,
        net: &mut MlpNetwork,
        grads: &NetGrads,
        step: usize,
        total_steps: usize,
    ) -> Result<StepInfo> {
        let lr = self
            .config
            .lr_schedule
            .rate(self.config.learning_rate, step, total_steps);
        self.step_with_lr(net, grads, lr)
    }
}

/// Mean of squared residuals.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("mse of empty tensors".into()));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(s / pred.len() as f64)
}
