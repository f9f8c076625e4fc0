//! Declarative experiment runner.
//!
//! [`run_experiment`] dispatches on the config's kind and returns the report
//! together with every training trace; [`write_outputs`] lays them out as one
//! directory per run:
//!
//! ```text
//! <out>/config.toml      copy of the effective config
//! <out>/manifest.json    kind, seeds, package version and the file list
//! <out>/report.json      the ExperimentReport
//! <out>/summary.txt      plain-text table of the report
//! <out>/traces/<label>.jsonl, <label>.csv
//! ```
//!
//! Nothing time- or host-dependent is written, so re-running a config yields
//! byte-identical files.

mod config;
mod equivalence;
mod perturbation;
mod ppo_dormancy;
mod report;
mod task_switch;

pub use config::{
    ContinueTask, EquivalenceConfig, ExperimentConfig, ExperimentKind, FinetuneConfig, NetworkSpec,
    PerturbationConfig, PpoExperimentConfig, PretrainConfig, TaskSwitchConfig, CONFIG_FORMAT, CONFIG_VERSION,
};
pub use equivalence::{run_equivalence_suite, run_gradient_check_suite, GradientSuiteConfig, GradientSuiteReport};
pub use perturbation::{perturb_zero_gradient_neurons, run_perturbation};
pub use ppo_dormancy::run_ppo_dormancy;
pub use report::{
    aggregate, compare, geometric_mean, mean_std, ArmAggregate, Comparison, Criterion, ExperimentReport, ReportRow,
    REPORT_FORMAT,
};
pub use task_switch::run_task_switch;

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{self, overlap_masks};
use crate::nn::{init_network, MlpNetwork};
use crate::optim::OptimizerConfig;
use crate::tasks::{generate_dataset, make_pretrain_task, Dataset, PretrainKind, Split};
use crate::trace::{MetricConfig, SetKind, TrainingTrace};
use crate::train::{train_supervised, TrainOptions};

/// A finished experiment: its report and every trace, keyed by label.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub traces: Vec<(String, TrainingTrace)>,
}

/// Runs the experiment named by `cfg.kind`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    match cfg.kind {
        ExperimentKind::TaskSwitch => run_task_switch(cfg),
        ExperimentKind::PpoDormancy => run_ppo_dormancy(cfg),
        ExperimentKind::Perturbation => run_perturbation(cfg),
        ExperimentKind::EquivalenceSuite => run_equivalence_suite(cfg),
        ExperimentKind::GradientFree => Err(Error::InvalidArgument(
            "experiment kind \"gradient-free\" is reserved but not implemented: no procedure is specified for it"
                .into(),
        )),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    version: u32,
    kind: &'static str,
    name: &'a str,
    seeds: &'a [u64],
    package_version: &'static str,
    files: Vec<String>,
}

/// Writes config, manifest, report, summary and traces into `dir`.
pub fn write_outputs(dir: impl AsRef<Path>, cfg: &ExperimentConfig, out: &ExperimentOutput) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("traces"))?;
    let mut files = vec![
        "config.toml".to_string(),
        "report.json".to_string(),
        "summary.txt".to_string(),
    ];
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&out.report)? + "\n")?;
    std::fs::write(dir.join("summary.txt"), out.report.to_text())?;
    for (label, trace) in &out.traces {
        trace.write(dir.join("traces"), label)?;
        files.push(format!("traces/{label}.jsonl"));
        files.push(format!("traces/{label}.csv"));
    }
    let manifest = Manifest {
        format: "plasticity-run-manifest",
        version: 1,
        kind: cfg.kind.name(),
        name: &cfg.name,
        seeds: &cfg.seeds,
        package_version: env!("CARGO_PKG_VERSION"),
        files,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Deterministic sub-seed for a named random stream of a run.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    // FNV-1a over the stream name, mixed with the seed by SplitMix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Datasets of one pretraining task.
pub(crate) struct PretrainData {
    pub train: Dataset,
    pub test: Dataset,
    pub probe: Dataset,
}

pub(crate) fn pretrain_data(kind: PretrainKind, seed: u64, cfg: &PretrainConfig, probe_size: usize) -> Result<PretrainData> {
    let tag = match kind {
        PretrainKind::DormancyInducing => "dormancy",
        PretrainKind::Benign => "benign",
    };
    let spec = make_pretrain_task(kind, derive_seed(seed, &format!("{tag}-task")));
    Ok(PretrainData {
        train: generate_dataset(&spec, cfg.samples, derive_seed(seed, &format!("{tag}-train")), Split::Train)?,
        test: generate_dataset(&spec, cfg.samples.min(1000), derive_seed(seed, &format!("{tag}-test")), Split::Test)?,
        probe: generate_dataset(&spec, probe_size, derive_seed(seed, &format!("{tag}-probe")), Split::Probe)?,
    })
}

/// Minibatch pretraining of `net`, logging snapshots on the task's probe.
pub(crate) fn pretrain(
    net: &mut MlpNetwork,
    data: &PretrainData,
    cfg: &PretrainConfig,
    metrics: &MetricConfig,
    seed: u64,
    trace: &mut TrainingTrace,
) -> Result<()> {
    let mut opts = TrainOptions::full_batch(cfg.epochs());
    opts.batch_size = Some(cfg.batch_size);
    opts.shuffle_seed = derive_seed(seed, "pretrain-shuffle");
    opts.metrics = MetricConfig {
        // Long pretraining runs are sampled about 20 times.
        cadence: metrics.cadence.max(cfg.steps / 20).max(1),
        ..metrics.clone()
    };
    train_supervised(net, &data.train, Some(&data.test), &cfg.optimizer, &opts, &data.probe.inputs, trace)
}

/// Fresh network of the configured architecture.
pub(crate) fn fresh_network(spec: &NetworkSpec, seed: u64) -> Result<MlpNetwork> {
    init_network(&spec.widths(), spec.activation, derive_seed(seed, "init"))
}

/// Dormant fraction of `layer` on `probe` at the configured threshold.
pub(crate) fn dormant_fraction(net: &MlpNetwork, probe: &Dataset, layer: usize, tau_d: f64) -> Result<f64> {
    let out = net.forward(&probe.inputs)?;
    Ok(metrics::dormancy_index(layer, &out.activations[layer], tau_d)?.dormant_fraction)
}

pub(crate) fn with_lr(opt: &OptimizerConfig, lr: f64) -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: lr,
        ..opt.clone()
    }
}

/// Consecutive-snapshot overlap of a layer's zero-gradient set after a
/// burn-in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PersistenceStats {
    pub pairs: usize,
    /// Pairs where at least one set was non-empty.
    pub informative_pairs: usize,
    /// Mean coefficient over informative pairs; `None` if there are none.
    pub mean_overlap: Option<f64>,
    pub min_overlap: Option<f64>,
}

/// Overlap statistics of `layer`'s zero-gradient set between consecutive
/// snapshots of `network`, skipping snapshots taken before
/// `burn_in_fraction` of the final step. Pairs where both sets are empty
/// carry no information about persistence and are left out of the mean;
/// a pair where exactly one set is empty counts with coefficient 0.
pub fn zero_grad_persistence(
    traces: &[&TrainingTrace],
    network: &str,
    layer: usize,
    burn_in_fraction: f64,
) -> Result<PersistenceStats> {
    let mut coeffs = Vec::new();
    let mut pairs = 0;
    for t in traces {
        let snaps: Vec<_> = t.snapshots_of(network).collect();
        let last = snaps.last().map_or(0, |s| s.step) as f64;
        let kept: Vec<_> = snaps
            .into_iter()
            .filter(|s| s.step as f64 >= burn_in_fraction * last)
            .collect();
        for w in kept.windows(2) {
            let (a, b) = (
                &w[0].gradient.get(layer).ok_or_else(|| missing(layer))?.zero_grad_mask,
                &w[1].gradient.get(layer).ok_or_else(|| missing(layer))?.zero_grad_mask,
            );
            pairs += 1;
            let o = overlap_masks(b, a);
            if o.set_a_size + o.set_b_size > 0 {
                coeffs.push(o.coefficient);
            }
        }
    }
    let (mean, _) = mean_std(&coeffs);
    Ok(PersistenceStats {
        pairs,
        informative_pairs: coeffs.len(),
        mean_overlap: mean,
        min_overlap: coeffs.iter().copied().reduce(f64::min),
    })
}

/// Pools the every-step zero-gradient overlap tallies of several traces
/// (see [`crate::train::ZeroGradTracking`]). Traces without a tally
/// contribute nothing.
pub fn pooled_step_persistence(traces: &[&TrainingTrace]) -> PersistenceStats {
    let (mut pairs, mut informative, mut sum) = (0, 0, 0.0);
    let mut min: Option<f64> = None;
    for t in traces.iter().filter_map(|t| t.step_overlap.as_ref()) {
        pairs += t.pairs;
        informative += t.informative_pairs;
        sum += t.coefficient_sum;
        if let Some(m) = t.min_coefficient {
            min = Some(min.map_or(m, |x| x.min(m)));
        }
    }
    PersistenceStats {
        pairs,
        informative_pairs: informative,
        mean_overlap: (informative > 0).then(|| sum / informative as f64),
        min_overlap: min,
    }
}

fn missing(layer: usize) -> Error {
    Error::MissingSnapshots(format!("layer {layer} missing from a snapshot"))
}

/// Largest `|mean score - 1|` over every non-degenerate dormancy report in
/// the traces, with the number of reports checked.
pub fn dormancy_normalization_error(traces: &[&TrainingTrace]) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut n = 0;
    for t in traces {
        for s in &t.snapshots {
            for d in s.dormancy.iter().filter(|d| !d.degenerate) {
                let mean = d.scores.iter().sum::<f64>() / d.scores.len() as f64;
                worst = worst.max((mean - 1.0).abs());
                n += 1;
            }
        }
    }
    (worst, n)
}

/// Exact-threshold (score == 0, MAGI == 0) fraction series of one layer.
pub fn exact_fraction_series(trace: &TrainingTrace, network: &str, layer: usize, kind: SetKind) -> Vec<f64> {
    trace
        .snapshots_of(network)
        .filter_map(|s| match kind {
            SetKind::Dormant => s.dormancy.get(layer).map(|d| zero_fraction(&d.scores)),
            SetKind::ZeroGrad => s.gradient.get(layer).map(|g| zero_fraction(&g.magi)),
        })
        .collect()
}

fn zero_fraction(xs: &[f64]) -> f64 {
    xs.iter().filter(|&&x| x == 0.0).count() as f64 / xs.len().max(1) as f64
}

/// Number of seeds that must pass a per-seed criterion.
pub(crate) fn required_seeds(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction) - 1e-9).ceil().max(1.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{DormancyReport, GradientIntensityReport};
    use crate::trace::MetricSnapshot;

    #[test]
    fn derived_seeds_differ_by_stream_and_seed() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }

    #[test]
    fn required_seed_counts() {
        assert_eq!(required_seeds(5, 0.8), 4);
        assert_eq!(required_seeds(1, 0.8), 1);
        assert_eq!(required_seeds(10, 0.8), 8);
    }

    fn snap(step: usize, zero: Vec<bool>) -> MetricSnapshot {
        let n = zero.len();
        MetricSnapshot {
            id: 0,
            step,
            task_id: 0,
            network: "net".into(),
            dormancy: vec![DormancyReport {
                layer_index: 0,
                mean_abs: vec![1.0; n],
                scores: vec![1.0; n],
                dormant_mask: vec![false; n],
                dormant_fraction: 0.0,
                batch_size: 1,
                tau_d: 0.0,
                degenerate: false,
            }],
            gradient: vec![GradientIntensityReport {
                layer_index: 0,
                magi: zero.iter().map(|&z| if z { 0.0 } else { 1.0 }).collect(),
                zero_grad_fraction: zero.iter().filter(|&&z| z).count() as f64 / n as f64,
                zero_grad_mask: zero,
                tau_g: 0.0,
            }],
            weights: vec![],
            ranks: vec![],
        }
    }

    #[test]
    fn persistence_skips_burn_in_and_empty_pairs() {
        let mut t = TrainingTrace::new("e", "r");
        for (step, z) in [
            (0, vec![false, false, false]),
            (10, vec![true, false, false]),
            (20, vec![false, false, false]),
            (30, vec![false, false, false]),
            (40, vec![true, true, false]),
            (50, vec![true, true, false]),
        ] {
            t.push_snapshot(snap(step, z));
        }
        // Burn-in 0.5 keeps steps 30, 40, 50: pairs (30,40) -> 0, (40,50) -> 1.
        let s = zero_grad_persistence(&[&t], "net", 0, 0.5).unwrap();
        assert_eq!(s.pairs, 2);
        assert_eq!(s.informative_pairs, 2);
        assert_eq!(s.mean_overlap, Some(0.5));
        assert_eq!(s.min_overlap, Some(0.0));
        let all = zero_grad_persistence(&[&t], "net", 0, 0.0).unwrap();
        assert_eq!(all.pairs, 5);
        // (20,30) has both sets empty.
        assert_eq!(all.informative_pairs, 4);
    }

    #[test]
    fn normalization_and_exact_series() {
        let mut t = TrainingTrace::new("e", "r");
        t.push_snapshot(snap(0, vec![true, false]));
        let (err, n) = dormancy_normalization_error(&[&t]);
        assert_eq!((err, n), (0.0, 1));
        assert_eq!(exact_fraction_series(&t, "net", 0, SetKind::ZeroGrad), vec![0.5]);
        assert_eq!(exact_fraction_series(&t, "net", 0, SetKind::Dormant), vec![0.0]);
    }

    #[test]
    fn gradient_free_is_reserved() {
        let cfg = ExperimentConfig::new(ExperimentKind::GradientFree);
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.to_string().contains("not implemented"));
    }
}
