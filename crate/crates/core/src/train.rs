//! Supervised training loop with metric hooks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::MlpNetwork;
use crate::optim::{mse_loss, Optimizer, OptimizerConfig};
use crate::tasks::Dataset;
use crate::tensor::Tensor;
use crate::metrics::magi_with_target;
use crate::trace::{take_snapshot, MetricConfig, StepOverlapTally, StepRecord, TrainingTrace};

/// Loss above which training is considered diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    /// `None` trains full-batch (one step per epoch).
    pub batch_size: Option<usize>,
    /// Seeds minibatch shuffling.
    pub shuffle_seed: u64,
    pub metrics: MetricConfig,
    pub task_id: usize,
    /// Added to every logged step so consecutive phases share one axis.
    pub step_offset: usize,
    /// Skip the metric snapshots and only log losses.
    pub losses_only: bool,
    /// Also tally the overlap of one layer's zero-gradient set between every
    /// pair of consecutive steps (stored in the trace's `step_overlap`).
    pub track_zero_grad: Option<ZeroGradTracking>,
}

/// Every-step zero-gradient tracking of one layer on the probe batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZeroGradTracking {
    pub layer: usize,
    /// Steps before `ceil(burn_in_fraction * total_steps)` are skipped.
    pub burn_in_fraction: f64,
}

impl TrainOptions {
    pub fn full_batch(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: None,
            shuffle_seed: 0,
            metrics: MetricConfig::default(),
            task_id: 0,
            step_offset: 0,
            losses_only: false,
            track_zero_grad: None,
        }
    }
}

fn mse_grads(net: &MlpNetwork, x: &Tensor, y: &Tensor) -> Result<(f64, crate::nn::NetGrads)> {
    net.gradients(x, |tape, out| {
        let t = tape.constant(y.clone())?;
        tape.mse(out, t)
    })
}

/// Test-set MSE of `net`.
pub fn evaluate(net: &MlpNetwork, data: &Dataset) -> Result<f64> {
    mse_loss(&net.predict(&data.inputs)?, &data.targets)
}

/// Trains `net` on `train` with MSE, logging losses and metric snapshots on
/// `probe` every `metrics.cadence` steps (and at the first and last step).
///
/// Divergence or non-finite gradients stop training early; the trace's
/// `halted` field says why.
pub fn train_supervised(
    net: &mut MlpNetwork,
    train: &Dataset,
    test: Option<&Dataset>,
    optimizer: &OptimizerConfig,
    opts: &TrainOptions,
    probe: &Tensor,
    trace: &mut TrainingTrace,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if opts.metrics.cadence == 0 {
        return Err(Error::InvalidArgument("metric cadence must be positive".into()));
    }
    let mut opt = Optimizer::new(optimizer.clone())?;
    let n = train.len();
    let batch = opts.batch_size.unwrap_or(n).clamp(1, n);
    let steps_per_epoch = n.div_ceil(batch);
    let total = opts.epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.shuffle_seed);
    let mut order: Vec<usize> = (0..n).collect();

    let log = |net: &MlpNetwork, local: usize, train_loss: f64, trace: &mut TrainingTrace| -> Result<()> {
        let step = opts.step_offset + local;
        let mut snaps = Vec::new();
        if !opts.losses_only {
            let s = take_snapshot(net, probe, &opts.metrics, 0, step, opts.task_id, "net")?;
            snaps.push(trace.push_snapshot(s));
        }
        let test_loss = test.map(|t| evaluate(net, t)).transpose()?;
        trace.push_record(StepRecord {
            step,
            task_id: opts.task_id,
            train_loss,
            test_loss,
            episodic_return: None,
            snapshots: snaps,
            wall_clock_ms: None,
        })
    };

    let mut tally = opts.track_zero_grad.map(|t| {
        if !(0.0..=1.0).contains(&t.burn_in_fraction) {
            return Err(Error::InvalidArgument(format!("burn-in fraction {} outside [0, 1]", t.burn_in_fraction)));
        }
        net.layer(t.layer)?;
        let tally = StepOverlapTally {
            layer: t.layer,
            from_step: (t.burn_in_fraction * total as f64).ceil() as usize,
            ..StepOverlapTally::default()
        };
        Ok(tally)
    })
    .transpose()?;
    let mut prev_mask: Option<Vec<bool>> = None;
    let mut track = |net: &MlpNetwork, step: usize, tally: &mut Option<StepOverlapTally>| -> Result<()> {
        let Some(t) = tally.as_mut() else { return Ok(()) };
        if step < t.from_step {
            return Ok(());
        }
        let m = &opts.metrics;
        let mask = magi_with_target(net, probe, t.layer, m.tau_g, m.magi_target)?.zero_grad_mask;
        if let Some(prev) = &prev_mask {
            t.push(prev, &mask);
        }
        prev_mask = Some(mask);
        Ok(())
    };

    let initial = evaluate(net, train)?;
    log(net, 0, initial, trace)?;
    track(net, 0, &mut tally)?;

    let full = batch == n;
    let mut step = 0;
    'epochs: for _ in 0..opts.epochs {
        if !full {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let (loss, grads) = if full {
                mse_grads(net, &train.inputs, &train.targets)?
            } else {
                mse_grads(net, &train.inputs.select_rows(chunk), &train.targets.select_rows(chunk))?
            };
            if !(loss <= DIVERGENCE_LOSS) {
                trace.halted = Some(format!("diverged at step {step}: loss {loss}"));
                break 'epochs;
            }
            if let Err(e) = opt.step(net, &grads, step, total) {
                trace.halted = Some(format!("step {step} aborted: {e}"));
                break 'epochs;
            }
            step += 1;
            track(net, step, &mut tally)?;
            if step % opts.metrics.cadence == 0 || step == total {
                let loss_now = if full { evaluate(net, train)? } else { loss };
                log(net, step, loss_now, trace)?;
            }
        }
    }
    trace.step_overlap = tally;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_network, Activation};
    use crate::tasks::{generate_dataset, InputDistribution, RegressionTaskSpec, Split, TargetFunction};

    fn linear_task(sigma: f64) -> RegressionTaskSpec {
        RegressionTaskSpec {
            name: "linear".into(),
            input_dim: 3,
            noise_sigma: sigma,
            input_distribution: InputDistribution::Uniform { low: -1.0, high: 1.0 },
            target: TargetFunction::Linear {
                coefficients: vec![1.5, -0.7, 0.3],
                intercept: 0.5,
            },
            seed: 0,
        }
    }

    #[test]
    fn zero_epochs_logs_initial_snapshot_only() {
        let spec = linear_task(0.1);
        let data = generate_dataset(&spec, 32, 1, Split::Train).unwrap();
        let mut net = init_network(&[3, 4, 1], Activation::Relu, 0).unwrap();
        let before = net.clone();
        let mut trace = TrainingTrace::new("t", "r");
        train_supervised(
            &mut net,
            &data,
            None,
            &OptimizerConfig::sgd(0.01),
            &TrainOptions::full_batch(0),
            &data.inputs,
            &mut trace,
        )
        .unwrap();
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.snapshots.len(), 1);
        assert_eq!(net, before);
    }

    #[test]
    fn linear_target_converges_to_noise_floor() {
        let sigma = 0.1;
        let spec = linear_task(sigma);
        let train = generate_dataset(&spec, 1000, 1, Split::Train).unwrap();
        let test = generate_dataset(&spec, 1000, 2, Split::Test).unwrap();
        let mut net = init_network(&[3, 1], Activation::Identity, 0).unwrap();
        let mut trace = TrainingTrace::new("t", "r");
        let mut opts = TrainOptions::full_batch(2000);
        opts.losses_only = true;
        opts.metrics.cadence = 500;
        train_supervised(
            &mut net,
            &train,
            Some(&test),
            &OptimizerConfig::sgd(0.1),
            &opts,
            &train.inputs,
            &mut trace,
        )
        .unwrap();
        let last = trace.final_record().unwrap();
        assert_eq!(last.step, 2000);
        assert!(last.test_loss.unwrap() <= sigma * sigma * 1.1, "{last:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let spec = RegressionTaskSpec::benchmark();
        let data = generate_dataset(&spec, 64, 1, Split::Train).unwrap();
        let run = || {
            let mut net = init_network(&[17, 8, 1], Activation::Relu, 3).unwrap();
            let mut trace = TrainingTrace::new("t", "r");
            let mut opts = TrainOptions::full_batch(3);
            opts.batch_size = Some(16);
            opts.metrics.cadence = 4;
            train_supervised(&mut net, &data, None, &OptimizerConfig::adam(0.01), &opts, &data.inputs, &mut trace)
                .unwrap();
            (net, trace.to_jsonl().unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_halts() {
        let spec = RegressionTaskSpec::benchmark();
        let data = generate_dataset(&spec, 64, 1, Split::Train).unwrap();
        let mut net = init_network(&[17, 8, 1], Activation::Identity, 3).unwrap();
        let mut trace = TrainingTrace::new("t", "r");
        let mut opts = TrainOptions::full_batch(200);
        opts.losses_only = true;
        let r = train_supervised(&mut net, &data, None, &OptimizerConfig::sgd(10.0), &opts, &data.inputs, &mut trace);
        assert!(r.is_ok());
        assert!(trace.halted.is_some());
    }
}
