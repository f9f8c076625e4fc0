//! Experiment configuration files.
//!
//! Configs are TOML documents with a format tag and version:
//!
//! ```toml
//! format = "plasticity-experiment"
//! version = 1
//! kind = "task-switch"   # task-switch | ppo-dormancy | perturbation | equivalence-suite
//! name = "appendix-a"
//! seeds = [0, 1, 2, 3, 4]
//!
//! [network]
//! hidden = [64, 64]
//! activation = "relu"
//!
//! [task_switch.finetune]
//! learning_rates = [0.01, 0.005]
//! ```
//!
//! Every section other than the header has defaults, so a config only needs
//! the keys it changes. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::optim::OptimizerConfig;
use crate::ppo::PpoConfig;
use crate::tasks::BENCHMARK_DIM;
use crate::trace::MetricConfig;

pub const CONFIG_FORMAT: &str = "plasticity-experiment";
pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    TaskSwitch,
    PpoDormancy,
    Perturbation,
    EquivalenceSuite,
    /// Reserved: there is no documented procedure to implement.
    GradientFree,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::TaskSwitch => "task-switch",
            ExperimentKind::PpoDormancy => "ppo-dormancy",
            ExperimentKind::Perturbation => "perturbation",
            ExperimentKind::EquivalenceSuite => "equivalence-suite",
            ExperimentKind::GradientFree => "gradient-free",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task-switch" => Ok(Self::TaskSwitch),
            "ppo-dormancy" => Ok(Self::PpoDormancy),
            "perturbation" => Ok(Self::Perturbation),
            "equivalence-suite" => Ok(Self::EquivalenceSuite),
            "gradient-free" => Ok(Self::GradientFree),
            other => Err(Error::InvalidArgument(format!("unknown experiment kind {other:?}"))),
        }
    }
}

/// Hidden widths and activation of the regression networks. Input width is
/// fixed by the benchmark (17) and output width is 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_relu")]
    pub activation: Activation,
}

fn d_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn d_relu() -> Activation {
    Activation::Relu
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            hidden: d_hidden(),
            activation: d_relu(),
        }
    }
}

impl NetworkSpec {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![BENCHMARK_DIM];
        w.extend_from_slice(&self.hidden);
        w.push(1);
        w
    }

    /// Index of the last hidden layer.
    pub fn last_hidden(&self) -> usize {
        self.hidden.len().saturating_sub(1)
    }
}

/// Minibatch training on a synthetic pretraining task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "d_pre_steps")]
    pub steps: usize,
    #[serde(default = "d_pre_batch")]
    pub batch_size: usize,
    #[serde(default = "d_pre_samples")]
    pub samples: usize,
    #[serde(default = "d_pre_opt")]
    pub optimizer: OptimizerConfig,
}

fn d_pre_steps() -> usize {
    20_000
}
fn d_pre_batch() -> usize {
    64
}
fn d_pre_samples() -> usize {
    4096
}
fn d_pre_opt() -> OptimizerConfig {
    OptimizerConfig::adam(1e-3)
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: d_pre_steps(),
            batch_size: d_pre_batch(),
            samples: d_pre_samples(),
            optimizer: d_pre_opt(),
        }
    }
}

impl PretrainConfig {
    /// Epochs over `samples` rows needed for at least `steps` updates.
    pub fn epochs(&self) -> usize {
        let per_epoch = self.samples.div_ceil(self.batch_size.max(1));
        self.steps.div_ceil(per_epoch.max(1))
    }
}

/// Full-batch fine-tuning on the 17-input benchmark task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "d_ft_epochs")]
    pub epochs: usize,
    #[serde(default = "d_ft_samples")]
    pub train_samples: usize,
    #[serde(default = "d_ft_samples")]
    pub test_samples: usize,
    /// Optimizer settings; `learning_rate` is replaced by each entry of
    /// `learning_rates`.
    #[serde(default = "d_ft_opt")]
    pub optimizer: OptimizerConfig,
    #[serde(default = "d_ft_lrs")]
    pub learning_rates: Vec<f64>,
}

fn d_ft_epochs() -> usize {
    2000
}
fn d_ft_samples() -> usize {
    1000
}
fn d_ft_opt() -> OptimizerConfig {
    OptimizerConfig::sgd(0.01)
}
fn d_ft_lrs() -> Vec<f64> {
    vec![0.01, 0.005]
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: d_ft_epochs(),
            train_samples: d_ft_samples(),
            test_samples: d_ft_samples(),
            optimizer: d_ft_opt(),
            learning_rates: d_ft_lrs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSwitchConfig {
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    /// Minimum last-hidden-layer dormant fraction the dormancy arm must reach
    /// before the switch.
    #[serde(default = "d_floor")]
    pub dormancy_floor: f64,
    /// Maximum geometric-mean test-MSE ratio (dormancy arm / random arm).
    #[serde(default = "d_ratio")]
    pub max_mse_ratio: f64,
    /// Minimum mean consecutive overlap of the zero-gradient set.
    #[serde(default = "d_persist")]
    pub persistence_threshold: f64,
    /// Fraction of each fine-tuning run excluded from the persistence check.
    #[serde(default = "d_burn_in")]
    pub burn_in_fraction: f64,
    /// Seeds that must pass a per-seed criterion, as a fraction.
    #[serde(default = "d_majority")]
    pub seed_pass_fraction: f64,
}

fn d_floor() -> f64 {
    0.2
}
fn d_ratio() -> f64 {
    1.5
}
fn d_persist() -> f64 {
    0.95
}
fn d_burn_in() -> f64 {
    0.1
}
fn d_majority() -> f64 {
    0.8
}

impl Default for TaskSwitchConfig {
    fn default() -> Self {
        Self {
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            dormancy_floor: d_floor(),
            max_mse_ratio: d_ratio(),
            persistence_threshold: d_persist(),
            burn_in_fraction: d_burn_in(),
            seed_pass_fraction: d_majority(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContinueTask {
    /// Keep training on the task the network was pretrained on.
    #[default]
    Pretrain,
    /// Switch to the 17-input benchmark task.
    Benchmark,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    /// Noise scale, relative to the standard deviation of the layer's weights.
    #[serde(default = "d_eta")]
    pub eta: f64,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub continue_on: ContinueTask,
    #[serde(default = "d_cont_steps")]
    pub continue_steps: usize,
    #[serde(default = "d_pre_opt")]
    pub continue_optimizer: OptimizerConfig,
    #[serde(default = "d_loss_ratio")]
    pub max_loss_ratio: f64,
}

fn d_eta() -> f64 {
    0.1
}
fn d_cont_steps() -> usize {
    5000
}
fn d_loss_ratio() -> f64 {
    1.1
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            eta: d_eta(),
            pretrain: PretrainConfig::default(),
            continue_on: ContinueTask::Pretrain,
            continue_steps: d_cont_steps(),
            continue_optimizer: d_pre_opt(),
            max_loss_ratio: d_loss_ratio(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceConfig {
    #[serde(default = "d_random_nets")]
    pub random_nets: usize,
    #[serde(default = "d_identity_nets")]
    pub identity_nets: usize,
    #[serde(default = "d_trained_nets")]
    pub trained_nets: usize,
    /// Pretraining budget of each trained net (dormancy-inducing task).
    #[serde(default = "d_equiv_pretrain")]
    pub pretrain: PretrainConfig,
    #[serde(default = "d_probe")]
    pub probe_size: usize,
}

fn d_random_nets() -> usize {
    100
}
fn d_identity_nets() -> usize {
    20
}
fn d_trained_nets() -> usize {
    20
}
fn d_probe() -> usize {
    256
}
fn d_equiv_pretrain() -> PretrainConfig {
    PretrainConfig {
        steps: 2000,
        ..PretrainConfig::default()
    }
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            random_nets: d_random_nets(),
            identity_nets: d_identity_nets(),
            trained_nets: d_trained_nets(),
            pretrain: d_equiv_pretrain(),
            probe_size: d_probe(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoExperimentConfig {
    #[serde(default)]
    pub ppo: PpoConfig,
    /// Minimum Pearson correlation between the dormant and zero-gradient
    /// fraction series of the last hidden layer.
    #[serde(default = "d_min_corr")]
    pub min_correlation: f64,
    #[serde(default = "d_majority")]
    pub seed_pass_fraction: f64,
}

fn d_min_corr() -> f64 {
    0.8
}

impl Default for PpoExperimentConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            min_correlation: d_min_corr(),
            seed_pass_fraction: d_majority(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format: String,
    pub version: u32,
    pub kind: ExperimentKind,
    pub name: String,
    pub seeds: Vec<u64>,
    /// Where results go when the caller does not override it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default)]
    pub task_switch: TaskSwitchConfig,
    #[serde(default)]
    pub perturbation: PerturbationConfig,
    #[serde(default)]
    pub ppo_dormancy: PpoExperimentConfig,
    #[serde(default)]
    pub equivalence: EquivalenceConfig,
}

impl ExperimentConfig {
    /// Default configuration of `kind` with seeds 0–4.
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            format: CONFIG_FORMAT.into(),
            version: CONFIG_VERSION,
            kind,
            name: kind.name().into(),
            seeds: (0..5).collect(),
            output_dir: None,
            network: NetworkSpec::default(),
            metrics: MetricConfig::default(),
            task_switch: TaskSwitchConfig::default(),
            perturbation: PerturbationConfig::default(),
            ppo_dormancy: PpoExperimentConfig::default(),
            equivalence: EquivalenceConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.format != CONFIG_FORMAT {
            return Err(Error::Format(format!(
                "expected format {CONFIG_FORMAT:?}, got {:?}",
                self.format
            )));
        }
        if self.version != CONFIG_VERSION {
            return Err(Error::Format(format!(
                "unsupported config version {} (this build reads {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("invalid experiment name {:?}", self.name));
        }
        if self.network.hidden.is_empty() || self.network.hidden.contains(&0) {
            return bad("network needs at least one non-empty hidden layer".into());
        }
        if self.metrics.cadence == 0 || self.metrics.probe_size == 0 {
            return bad("metric cadence and probe size must be positive".into());
        }
        let ts = &self.task_switch;
        for p in [&ts.pretrain, &self.perturbation.pretrain, &self.equivalence.pretrain] {
            p.optimizer.validate()?;
            if p.batch_size == 0 || p.samples == 0 {
                return bad("pretrain batch size and sample count must be positive".into());
            }
        }
        ts.finetune.optimizer.validate()?;
        if ts.finetune.learning_rates.is_empty() {
            return bad("task-switch needs at least one fine-tuning learning rate".into());
        }
        if ts.finetune.learning_rates.iter().any(|lr| !(*lr > 0.0)) {
            return bad("fine-tuning learning rates must be > 0".into());
        }
        if ts.finetune.train_samples == 0 || ts.finetune.test_samples == 0 {
            return bad("fine-tuning sample counts must be positive".into());
        }
        if !(0.0..1.0).contains(&ts.burn_in_fraction) {
            return bad("burn_in_fraction must be in [0, 1)".into());
        }
        if !(self.perturbation.eta >= 0.0 && self.perturbation.eta.is_finite()) {
            return bad("perturbation eta must be finite and >= 0".into());
        }
        self.perturbation.continue_optimizer.validate()?;
        self.ppo_dormancy.ppo.validate()?;
        Ok(())
    }
}
