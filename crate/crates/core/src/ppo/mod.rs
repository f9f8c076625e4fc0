//! Proximal policy optimization on the point-mass environment.
//!
//! A Gaussian policy (MLP mean, state-independent learned log-std) and an
//! MLP value function share one Adam optimizer with decoupled weight decay
//! and global gradient-norm clipping. Advantages come from GAE and are
//! normalized per minibatch; there is no entropy bonus.

mod env;
mod gae;

pub use env::{env_step, EnvConfig, ToyEnvState, ACT_DIM, OBS_DIM};
pub use gae::compute_gae;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::GradTape;
use crate::error::{Error, Result};
use crate::nn::{init_network, Activation, MlpNetwork, NetGrads};
use crate::optim::{LrSchedule, Optimizer, OptimizerConfig};
use crate::tensor::Tensor;
use crate::trace::{take_snapshot, MetricConfig, StepRecord, TrainingTrace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_lambda")]
    pub gae_lambda: f64,
    #[serde(default = "d_clip")]
    pub clip_coef: f64,
    #[serde(default = "d_value_coef")]
    pub value_coef: f64,
    #[serde(default = "d_minibatches")]
    pub minibatches: usize,
    #[serde(default = "d_epochs")]
    pub update_epochs: usize,
    #[serde(default = "d_grad_clip")]
    pub grad_clip_norm: f64,
    /// Initial learning rate; annealed linearly per iteration when
    /// `anneal_lr` is set.
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_true")]
    pub anneal_lr: bool,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_total_steps")]
    pub total_steps: usize,
    /// Environment steps collected per iteration.
    #[serde(default = "d_rollout")]
    pub rollout_len: usize,
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_activation")]
    pub activation: Activation,
    #[serde(default = "d_true")]
    pub normalize_advantages: bool,
    #[serde(default)]
    pub env: EnvConfig,
    /// Metric snapshots are taken every this many iterations (and after the
    /// last one).
    #[serde(default = "d_metric_every")]
    pub metric_every: usize,
}

fn d_gamma() -> f64 {
    0.99
}
fn d_lambda() -> f64 {
    0.95
}
fn d_clip() -> f64 {
    0.2
}
fn d_value_coef() -> f64 {
    0.5
}
fn d_minibatches() -> usize {
    32
}
fn d_epochs() -> usize {
    10
}
fn d_grad_clip() -> f64 {
    0.5
}
fn d_lr() -> f64 {
    1e-4
}
fn d_true() -> bool {
    true
}
fn d_weight_decay() -> f64 {
    1e-4
}
fn d_total_steps() -> usize {
    200_000
}
fn d_rollout() -> usize {
    2048
}
fn d_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn d_activation() -> Activation {
    Activation::Relu
}
fn d_metric_every() -> usize {
    1
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: d_gamma(),
            gae_lambda: d_lambda(),
            clip_coef: d_clip(),
            value_coef: d_value_coef(),
            minibatches: d_minibatches(),
            update_epochs: d_epochs(),
            grad_clip_norm: d_grad_clip(),
            learning_rate: d_lr(),
            anneal_lr: true,
            weight_decay: d_weight_decay(),
            total_steps: d_total_steps(),
            rollout_len: d_rollout(),
            hidden: d_hidden(),
            activation: d_activation(),
            normalize_advantages: true,
            env: EnvConfig::default(),
            metric_every: d_metric_every(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad(format!("gae_lambda must be in (0, 1], got {}", self.gae_lambda));
        }
        if !(self.clip_coef > 0.0) {
            return bad(format!("clip_coef must be > 0, got {}", self.clip_coef));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be > 0".into());
        }
        if self.minibatches == 0 || self.rollout_len < self.minibatches {
            return bad(format!(
                "rollout_len {} must be at least minibatches {} (> 0)",
                self.rollout_len, self.minibatches
            ));
        }
        if !self.rollout_len.is_multiple_of(self.minibatches) {
            return bad("minibatches must divide rollout_len".into());
        }
        if self.metric_every == 0 {
            return bad("metric_every must be positive".into());
        }
        if self.env.horizon == 0 || !(self.env.dt > 0.0) {
            return bad("env horizon and dt must be positive".into());
        }
        self.optimizer_config().validate()
    }

    /// Number of collect/update iterations in a run.
    pub fn iterations(&self) -> usize {
        self.total_steps / self.rollout_len
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr_schedule: LrSchedule::Constant,
            weight_decay: self.weight_decay,
            grad_clip_norm: Some(self.grad_clip_norm),
            ..OptimizerConfig::adam(self.learning_rate)
        }
    }

    /// Learning rate of iteration `iter` (0-based): linear from the base rate
    /// down to `base / iterations` on the final iteration.
    pub fn learning_rate_at(&self, iter: usize) -> f64 {
        if !self.anneal_lr {
            return self.learning_rate;
        }
        let n = self.iterations().max(1);
        LrSchedule::LinearAnneal.rate(self.learning_rate, iter, n + 1)
    }
}

/// Diagonal Gaussian policy with an MLP mean and state-independent log-std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mean: MlpNetwork,
    pub log_std: Vec<f64>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl GaussianPolicy {
    pub fn new(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mean = init_network(widths, activation, seed)?;
        let log_std = vec![0.0; mean.n_out()];
        Ok(Self { mean, log_std })
    }

    /// Log-density of `action` under mean `mu`.
    pub fn log_prob(&self, mu: &[f64], action: &[f64]) -> f64 {
        let mut lp = -0.5 * LN_2PI * mu.len() as f64;
        for ((m, a), ls) in mu.iter().zip(action).zip(&self.log_std) {
            let z = (a - m) * (-ls).exp();
            lp -= 0.5 * z * z + ls;
        }
        lp
    }

    /// Samples an action for one observation; returns it with its log-prob.
    pub fn sample(&self, obs: &[f64], rng: &mut impl Rng) -> Result<(Vec<f64>, f64)> {
        let mu = self
            .mean
            .predict(&Tensor::matrix(1, obs.len(), obs.to_vec())?)?
            .into_data();
        let action: Vec<f64> = mu
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = self.log_prob(&mu, &action);
        Ok((action, lp))
    }
}

/// One rollout's worth of transitions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBuffer {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub observations: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Empty until [`RolloutBuffer::finish`] runs.
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, obs: &[f64], action: &[f64], log_prob: f64, reward: f64, value: f64, done: bool) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        debug_assert_eq!(action.len(), self.act_dim);
        self.observations.extend_from_slice(obs);
        self.actions.extend_from_slice(action);
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
        self.dones.push(done);
        self.advantages.clear();
        self.returns.clear();
    }

    /// Fills advantages and returns with GAE.
    pub fn finish(&mut self, bootstrap: f64, gamma: f64, lambda: f64) -> Result<()> {
        let (a, r) = compute_gae(&self.rewards, &self.values, &self.dones, bootstrap, gamma, lambda)?;
        self.advantages = a;
        self.returns = r;
        Ok(())
    }

    pub fn is_ready(&self) -> bool {
        !self.is_empty() && self.advantages.len() == self.len()
    }

    pub fn observations_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(self.len(), self.obs_dim, self.observations.clone())
    }

    fn rows(&self, data: &[f64], width: usize, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&data[i * width..(i + 1) * width]);
        }
        out
    }
}

/// Per-sample clipped surrogate `min(r·A, clip(r, 1-ε, 1+ε)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Shifts and scales to mean 0 and (sample) standard deviation 1.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = if adv.len() > 1 {
        adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let denom = var.sqrt() + 1e-8;
    adv.iter().map(|a| (a - mean) / denom).collect()
}

/// Averages over one call to [`ppo_update`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub total_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub minibatches: usize,
}

struct MinibatchLoss {
    total: f64,
    policy: f64,
    value: f64,
    approx_kl: f64,
    clip_fraction: f64,
    flat_grads: Vec<f64>,
}

/// Loss and flattened gradient (policy mean net, log-std, value net) of one
/// minibatch.
#[allow(clippy::too_many_arguments)]
fn minibatch_loss(
    policy: &GaussianPolicy,
    value: &MlpNetwork,
    obs: Tensor,
    actions: Tensor,
    old_logp: Tensor,
    adv: Tensor,
    returns: Tensor,
    cfg: &PpoConfig,
) -> Result<MinibatchLoss> {
    let m = obs.rows();
    let d = policy.log_std.len();
    let mut tape = GradTape::new();
    let x = tape.constant(obs)?;
    let pv = policy.mean.forward_on_tape(&mut tape, x)?;
    let ls = tape.leaf(Tensor::new(vec![d], policy.log_std.clone())?.with_requires_grad(true))?;
    let a = tape.constant(actions)?;
    let diff = tape.sub(a, pv.output())?;
    let neg_ls = tape.scale(ls, -1.0)?;
    let inv_std = tape.exp(neg_ls)?;
    let z = tape.mul_row(diff, inv_std)?;
    let z2 = tape.square(z)?;
    let quad = tape.sum_rows(z2)?;
    let half = tape.scale(quad, -0.5)?;
    let ls_sum = tape.sum(ls)?;
    let neg_ls_sum = tape.scale(ls_sum, -1.0)?;
    let lp = tape.add_row(half, neg_ls_sum)?;
    let logp = tape.add_scalar(lp, -0.5 * LN_2PI * d as f64)?;
    let old = tape.constant(old_logp)?;
    let log_ratio = tape.sub(logp, old)?;
    let ratio = tape.exp(log_ratio)?;
    let advc = tape.constant(adv)?;
    let s1 = tape.mul(ratio, advc)?;
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip_coef, 1.0 + cfg.clip_coef)?;
    let s2 = tape.mul(clipped, advc)?;
    let surr = tape.minimum(s1, s2)?;
    let surr_mean = tape.mean(surr)?;
    let pg = tape.scale(surr_mean, -1.0)?;

    let vv = value.forward_on_tape(&mut tape, x)?;
    let ret = tape.constant(returns)?;
    let vl = tape.mse(vv.output(), ret)?;
    let vl_scaled = tape.scale(vl, cfg.value_coef)?;
    let total = tape.add(pg, vl_scaled)?;

    let (mut kl, mut clip_count) = (0.0, 0usize);
    for (&lr, &r) in tape.value(log_ratio).data().iter().zip(tape.value(ratio).data()) {
        kl += (r - 1.0) - lr;
        if (r - 1.0).abs() > cfg.clip_coef {
            clip_count += 1;
        }
    }
    let stats = (
        tape.scalar(total),
        tape.scalar(pg),
        tape.scalar(vl),
        kl / m as f64,
        clip_count as f64 / m as f64,
    );
    let mut g = tape.backward(total)?;
    let mut flat = NetGrads::from_tape(&mut g, &pv).to_flat();
    flat.extend(g.take(ls).expect("log-std leaf has a gradient"));
    flat.extend(NetGrads::from_tape(&mut g, &vv).to_flat());
    Ok(MinibatchLoss {
        total: stats.0,
        policy: stats.1,
        value: stats.2,
        approx_kl: stats.3,
        clip_fraction: stats.4,
        flat_grads: flat,
    })
}

/// Runs `update_epochs` passes of shuffled minibatch updates over a finished
/// buffer at learning rate `lr`. A non-finite loss or gradient aborts the
/// whole update and leaves both networks and the optimizer as they were.
pub fn ppo_update(
    policy: &mut GaussianPolicy,
    value: &mut MlpNetwork,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    optimizer: &mut Optimizer,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<UpdateStats> {
    if !buffer.is_ready() {
        return Err(Error::InvalidArgument(
            "rollout buffer has no advantages; call finish() first".into(),
        ));
    }
    let n = buffer.len();
    if cfg.minibatches == 0 || n < cfg.minibatches {
        return Err(Error::InvalidArgument(format!(
            "{n} samples cannot form {} minibatches",
            cfg.minibatches
        )));
    }
    let saved = (policy.clone(), value.clone(), optimizer.clone());
    let result = update_inner(policy, value, buffer, cfg, optimizer, lr, rng);
    if result.is_err() {
        (*policy, *value, *optimizer) = saved;
    }
    result
}

fn update_inner(
    policy: &mut GaussianPolicy,
    value: &mut MlpNetwork,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    optimizer: &mut Optimizer,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<UpdateStats> {
    let n = buffer.len();
    let mb = n / cfg.minibatches;
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    for _ in 0..cfg.update_epochs {
        order.shuffle(rng);
        for idx in order.chunks_exact(mb) {
            let m = idx.len();
            let obs = Tensor::matrix(m, buffer.obs_dim, buffer.rows(&buffer.observations, buffer.obs_dim, idx))?;
            let actions = Tensor::matrix(m, buffer.act_dim, buffer.rows(&buffer.actions, buffer.act_dim, idx))?;
            let old_logp = Tensor::matrix(m, 1, buffer.rows(&buffer.log_probs, 1, idx))?;
            let raw_adv = buffer.rows(&buffer.advantages, 1, idx);
            let adv = if cfg.normalize_advantages {
                normalize_advantages(&raw_adv)
            } else {
                raw_adv
            };
            let adv = Tensor::matrix(m, 1, adv)?;
            let returns = Tensor::matrix(m, 1, buffer.rows(&buffer.returns, 1, idx))?;
            let loss = minibatch_loss(policy, value, obs, actions, old_logp, adv, returns, cfg)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite("ppo loss".into()));
            }
            let GaussianPolicy { mean, log_std } = policy;
            let params = mean
                .params_mut()
                .chain(log_std.iter_mut())
                .chain(value.params_mut());
            optimizer.step_flat(params, &loss.flat_grads, lr)?;
            stats.policy_loss += loss.policy;
            stats.value_loss += loss.value;
            stats.total_loss += loss.total;
            stats.approx_kl += loss.approx_kl;
            stats.clip_fraction += loss.clip_fraction;
            stats.minibatches += 1;
        }
    }
    if stats.minibatches > 0 {
        let k = stats.minibatches as f64;
        stats.policy_loss /= k;
        stats.value_loss /= k;
        stats.total_loss /= k;
        stats.approx_kl /= k;
        stats.clip_fraction /= k;
    }
    Ok(stats)
}

/// Everything a PPO run produces.
#[derive(Clone, Debug)]
pub struct PpoRun {
    pub trace: TrainingTrace,
    pub policy: GaussianPolicy,
    pub value: MlpNetwork,
    /// Per-iteration update statistics.
    pub updates: Vec<UpdateStats>,
    /// The frozen probe batch used for every metric snapshot.
    pub probe: Tensor,
}

/// Network widths `[OBS_DIM, hidden..., out]`.
fn widths(hidden: &[usize], out: usize) -> Vec<usize> {
    let mut w = vec![OBS_DIM];
    w.extend_from_slice(hidden);
    w.push(out);
    w
}

/// Trains a policy and value function for `config.iterations()` rounds of
/// rollout collection followed by [`ppo_update`]. Metric snapshots of both
/// networks are taken on a probe batch drawn (evenly spaced) from the first
/// rollout and frozen for the rest of the run.
///
/// A failed update stops training; the trace's `halted` field records why.
pub fn ppo_train(config: &PpoConfig, seed: u64, metrics: &MetricConfig) -> Result<PpoRun> {
    config.validate()?;
    let mut policy = GaussianPolicy::new(&widths(&config.hidden, ACT_DIM), config.activation, seed)?;
    let mut value = init_network(
        &widths(&config.hidden, 1),
        config.activation,
        seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
    )?;
    let mut optimizer = Optimizer::new(config.optimizer_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ToyEnvState::reset(&mut rng);
    let mut episode_return = 0.0;
    let mut trace = TrainingTrace::new("ppo-dormancy", format!("seed-{seed}"));
    let mut updates = Vec::new();
    let mut probe: Option<Tensor> = None;
    let iterations = config.iterations();

    for iter in 0..iterations {
        let mut buffer = RolloutBuffer::new(OBS_DIM, ACT_DIM);
        let mut finished = Vec::new();
        for _ in 0..config.rollout_len {
            let obs = state.observation();
            let (action, logp) = policy.sample(&obs, &mut rng)?;
            let v = value.predict(&Tensor::matrix(1, OBS_DIM, obs.to_vec())?)?.data()[0];
            let (next, reward, done) = env_step(&config.env, &state, [action[0], action[1]]);
            episode_return += reward;
            buffer.push(&obs, &action, logp, reward, v, done);
            if done {
                finished.push(episode_return);
                episode_return = 0.0;
                state = ToyEnvState::reset(&mut rng);
            } else {
                state = next;
            }
        }
        let bootstrap = value
            .predict(&Tensor::matrix(1, OBS_DIM, state.observation().to_vec())?)?
            .data()[0];
        buffer.finish(bootstrap, config.gamma, config.gae_lambda)?;
        if probe.is_none() {
            probe = Some(probe_from(&buffer, metrics.probe_size)?);
        }

        let lr = config.learning_rate_at(iter);
        let stats = match ppo_update(&mut policy, &mut value, &buffer, config, &mut optimizer, lr, &mut rng) {
            Ok(s) => s,
            Err(e) => {
                trace.halted = Some(format!("iteration {iter} update aborted: {e}"));
                break;
            }
        };
        updates.push(stats);

        let step = (iter + 1) * config.rollout_len;
        let mut snaps = Vec::new();
        if (iter + 1) % config.metric_every == 0 || iter + 1 == iterations {
            let p = probe.as_ref().expect("probe is set after the first rollout");
            for (net, name) in [(&policy.mean, "policy"), (&value, "value")] {
                let s = take_snapshot(net, p, metrics, 0, step, 0, name)?;
                snaps.push(trace.push_snapshot(s));
            }
        }
        let episodic_return = if finished.is_empty() {
            None
        } else {
            Some(finished.iter().sum::<f64>() / finished.len() as f64)
        };
        trace.push_record(StepRecord {
            step,
            task_id: 0,
            train_loss: stats.total_loss,
            test_loss: None,
            episodic_return,
            snapshots: snaps,
            wall_clock_ms: None,
        })?;
    }
    Ok(PpoRun {
        trace,
        policy,
        value,
        updates,
        probe: probe.unwrap_or_else(|| Tensor::zeros(vec![0, OBS_DIM])),
    })
}

/// `size` evenly spaced observations from a rollout (all of them when the
/// rollout is shorter).
fn probe_from(buffer: &RolloutBuffer, size: usize) -> Result<Tensor> {
    let n = buffer.len();
    let take = size.clamp(1, n);
    let idx: Vec<usize> = (0..take).map(|k| k * n / take).collect();
    Tensor::matrix(take, buffer.obs_dim, buffer.rows(&buffer.observations, buffer.obs_dim, &idx))
}

/// Pearson correlation; `None` when either series is constant or the
/// lengths differ.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}
