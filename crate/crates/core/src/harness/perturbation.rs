//! Perturbation of trapped neurons.
//!
//! A network is pretrained on the dormancy-inducing task, then continued in
//! two arms from the same state and with the same minibatch order: a control
//! arm, and an arm whose zero-gradient neurons first receive Gaussian noise
//! on their incoming weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::{magi_with_target, Moments};
use crate::nn::MlpNetwork;
use crate::tasks::{generate_dataset, PretrainKind, RegressionTaskSpec, Split};
use crate::trace::{MetricConfig, TrainingTrace};
use crate::train::{train_supervised, TrainOptions};

use super::{
    compare, derive_seed, fresh_network, pretrain, pretrain_data, ContinueTask, Criterion, ExperimentConfig,
    ExperimentOutput, ExperimentReport, PretrainConfig, ReportRow,
};

pub const ARM_CONTROL: &str = "control";
pub const ARM_PERTURBED: &str = "perturbed";

/// Adds `N(0, (eta * std_l)^2)` noise to the incoming weights of every
/// neuron flagged in `masks[l]`, where `std_l` is the population standard
/// deviation of layer `l`'s weight matrix. Returns the number of neurons
/// perturbed. With `eta == 0` the network is left untouched.
pub fn perturb_zero_gradient_neurons(net: &mut MlpNetwork, masks: &[Vec<bool>], eta: f64, seed: u64) -> Result<usize> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("perturbation scale must be finite and >= 0, got {eta}")));
    }
    if masks.len() > net.layers.len() {
        return Err(Error::Shape(format!(
            "{} masks for a network with {} layers",
            masks.len(),
            net.layers.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0;
    for (layer, mask) in net.layers.iter_mut().zip(masks) {
        if mask.len() != layer.n_out {
            return Err(Error::Shape(format!(
                "mask of length {} for a layer of width {}",
                mask.len(),
                layer.n_out
            )));
        }
        let scale = eta * Moments::of(layer.weights.data()).std;
        let noise = Normal::new(0.0, scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            count += 1;
            if scale == 0.0 {
                continue;
            }
            for w in layer.weight_row_mut(i) {
                *w += noise.sample(&mut rng);
            }
        }
    }
    Ok(count)
}

/// Zero-gradient masks of every hidden layer on `probe`.
fn zero_grad_masks(net: &MlpNetwork, probe: &crate::Tensor, metrics: &MetricConfig) -> Result<Vec<Vec<bool>>> {
    (0..net.layers.len() - 1)
        .map(|l| Ok(magi_with_target(net, probe, l, metrics.tau_g, metrics.magi_target)?.zero_grad_mask))
        .collect()
}

fn continue_training(
    net: &mut MlpNetwork,
    data: &ContinueData,
    cfg: &ExperimentConfig,
    seed: u64,
    label: String,
) -> Result<TrainingTrace> {
    let p = &cfg.perturbation;
    let schedule = PretrainConfig {
        steps: p.continue_steps,
        batch_size: p.pretrain.batch_size,
        samples: data.train.len(),
        optimizer: p.continue_optimizer.clone(),
    };
    let mut opts = TrainOptions::full_batch(schedule.epochs());
    opts.batch_size = Some(schedule.batch_size);
    opts.shuffle_seed = derive_seed(seed, "continue-shuffle");
    opts.task_id = 1;
    opts.metrics = MetricConfig {
        cadence: cfg.metrics.cadence.max(p.continue_steps / 20).max(1),
        ..cfg.metrics.clone()
    };
    let mut trace = TrainingTrace::new(cfg.name.clone(), label);
    train_supervised(net, &data.train, Some(&data.test), &schedule.optimizer, &opts, &data.probe, &mut trace)?;
    Ok(trace)
}

struct ContinueData {
    train: crate::tasks::Dataset,
    test: crate::tasks::Dataset,
    probe: crate::Tensor,
}

pub fn run_perturbation(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let p = &cfg.perturbation;
    let mut report = ExperimentReport::new(cfg.kind, &cfg.name, &cfg.seeds);
    let mut traces = Vec::new();
    let mut identity = None;

    for (k, &seed) in cfg.seeds.iter().enumerate() {
        let pre = pretrain_data(PretrainKind::DormancyInducing, seed, &p.pretrain, cfg.metrics.probe_size)?;
        let mut net = fresh_network(&cfg.network, seed)?;
        let mut trace = TrainingTrace::new(cfg.name.clone(), format!("seed-{seed}-pretrain"));
        pretrain(&mut net, &pre, &p.pretrain, &cfg.metrics, seed, &mut trace)?;
        let pre_halted = trace.halted.clone();
        traces.push((format!("seed{seed}-pretrain"), trace));

        let data = match p.continue_on {
            ContinueTask::Pretrain => ContinueData {
                train: pre.train.clone(),
                test: pre.test.clone(),
                probe: pre.probe.inputs.clone(),
            },
            ContinueTask::Benchmark => {
                let bench = RegressionTaskSpec::benchmark();
                ContinueData {
                    train: generate_dataset(&bench, p.pretrain.samples, derive_seed(seed, "bench-train"), Split::Train)?,
                    test: generate_dataset(&bench, 1000, derive_seed(seed, "bench-test"), Split::Test)?,
                    probe: generate_dataset(&bench, cfg.metrics.probe_size, derive_seed(seed, "bench-probe"), Split::Probe)?
                        .inputs,
                }
            }
        };

        let masks = zero_grad_masks(&net, &data.probe, &cfg.metrics)?;
        let mut perturbed = net.clone();
        let n_perturbed = perturb_zero_gradient_neurons(&mut perturbed, &masks, p.eta, derive_seed(seed, "perturb"))?;

        let mut control = net.clone();
        let control_trace = continue_training(&mut control, &data, cfg, seed, format!("seed-{seed}-control"))?;
        let perturbed_trace = continue_training(&mut perturbed, &data, cfg, seed, format!("seed-{seed}-perturbed"))?;

        if k == 0 {
            // η = 0 arm: must reproduce the control bit for bit.
            let mut zero = net.clone();
            perturb_zero_gradient_neurons(&mut zero, &masks, 0.0, derive_seed(seed, "perturb"))?;
            let zero_trace = continue_training(&mut zero, &data, cfg, seed, format!("seed-{seed}-control"))?;
            let same_params = zero.params().zip(control.params()).all(|(a, b)| a.to_bits() == b.to_bits());
            let same_trace = zero_trace.to_jsonl()? == control_trace.to_jsonl()?;
            identity = Some((seed, same_params && same_trace));
        }

        for (arm, trace) in [(ARM_CONTROL, &control_trace), (ARM_PERTURBED, &perturbed_trace)] {
            let mut row = ReportRow::new(seed, arm);
            row.final_test_loss = trace.final_record().and_then(|r| r.test_loss);
            row.set_metric("zero_grad_neurons", n_perturbed as f64);
            if let Some(r) = trace.final_record() {
                row.set_metric("final_train_loss", r.train_loss);
            }
            if let Some(r) = trace.records.first().and_then(|r| r.test_loss) {
                row.set_metric("initial_test_loss", r);
            }
            if let Some(reason) = &trace.halted {
                row.flag(format!("training halted: {reason}"));
            }
            if let Some(reason) = &pre_halted {
                row.flag(format!("pretraining halted: {reason}"));
            }
            report.rows.push(row);
        }
        if n_perturbed == 0 {
            report.notes.push(format!(
                "seed {seed}: no zero-gradient neurons after pretraining; the perturbed arm equals the control"
            ));
        }
        traces.push((format!("seed{seed}-control"), control_trace));
        traces.push((format!("seed{seed}-perturbed"), perturbed_trace));
    }

    report.refresh_aggregates();
    let c = compare(&report.rows, ARM_PERTURBED, ARM_CONTROL, None);
    report.criteria.push(Criterion {
        name: "perturbed-loss-ratio".into(),
        passed: c.geometric_mean_ratio.is_some_and(|r| r <= p.max_loss_ratio),
        value: c.geometric_mean_ratio,
        threshold: p.max_loss_ratio,
        detail: format!(
            "eta {}; {} paired seeds{}",
            p.eta,
            c.paired_seeds,
            if c.note.is_empty() { String::new() } else { format!("; {}", c.note) }
        ),
    });
    report.comparisons.push(c);
    if let Some((seed, same)) = identity {
        report.criteria.push(Criterion {
            name: "eta-zero-identity".into(),
            passed: same,
            value: Some(f64::from(u8::from(same))),
            threshold: 1.0,
            detail: format!("seed {seed}: eta = 0 arm vs control, parameters and trace compared bitwise"),
        });
    }
    let counts: Vec<String> = report
        .rows
        .iter()
        .filter(|r| r.arm == ARM_PERTURBED)
        .map(|r| format!("seed {}: {}", r.seed, r.metrics.get("zero_grad_neurons").copied().unwrap_or(0.0)))
        .collect();
    report.notes.push(format!("zero-gradient neurons perturbed: {}", counts.join(", ")));
    Ok(ExperimentOutput { report, traces })
}
