//! Task-relevance experiment: pretrain, switch to the benchmark, fine-tune.
//!
//! Three arms per seed start from the same initialisation: one pretrained on
//! the dormancy-inducing task, one pretrained on the benign task, and one
//! left at random init. Every arm is then fine-tuned on the benchmark task at
//! each configured learning rate and its final test MSE recorded.

use crate::error::Result;
use crate::tasks::{generate_dataset, PretrainKind, RegressionTaskSpec, Split};
use crate::trace::TrainingTrace;
use crate::train::{train_supervised, TrainOptions, ZeroGradTracking};

use super::{
    compare, derive_seed, dormant_fraction, fresh_network, pooled_step_persistence, pretrain, pretrain_data,
    required_seeds, with_lr, zero_grad_persistence, Criterion, ExperimentConfig, ExperimentOutput, ExperimentReport, ReportRow,
};

pub const ARM_DORMANT: &str = "pretrained-dormant";
pub const ARM_BENIGN: &str = "pretrained-benign";
pub const ARM_RANDOM: &str = "random-init";

pub(crate) fn lr_label(lr: f64) -> String {
    format!("lr{lr}")
}

pub fn run_task_switch(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ts = &cfg.task_switch;
    let ft = &ts.finetune;
    let layer = cfg.network.last_hidden();
    let mut report = ExperimentReport::new(cfg.kind, &cfg.name, &cfg.seeds);
    let mut traces = Vec::new();
    let mut floor_values = Vec::new();
    let mut persistence_pass = 0;
    let mut persistence_detail = Vec::new();
    let mut snapshot_detail = Vec::new();

    for &seed in &cfg.seeds {
        let bench = RegressionTaskSpec::benchmark();
        let train = generate_dataset(&bench, ft.train_samples, derive_seed(seed, "bench-train"), Split::Train)?;
        let test = generate_dataset(&bench, ft.test_samples, derive_seed(seed, "bench-test"), Split::Test)?;
        let probe = generate_dataset(&bench, cfg.metrics.probe_size, derive_seed(seed, "bench-probe"), Split::Probe)?;

        // Pretraining phase.
        let mut starts = Vec::new();
        for (arm, kind) in [(ARM_DORMANT, PretrainKind::DormancyInducing), (ARM_BENIGN, PretrainKind::Benign)] {
            let data = pretrain_data(kind, seed, &ts.pretrain, cfg.metrics.probe_size)?;
            let mut net = fresh_network(&cfg.network, seed)?;
            let mut trace = TrainingTrace::new(cfg.name.clone(), format!("seed-{seed}-{arm}-pretrain"));
            pretrain(&mut net, &data, &ts.pretrain, &cfg.metrics, seed, &mut trace)?;
            let on_task = dormant_fraction(&net, &data.probe, layer, cfg.metrics.tau_d)?;
            let on_bench = dormant_fraction(&net, &probe, layer, cfg.metrics.tau_d)?;
            let halted = trace.halted.clone();
            traces.push((format!("seed{seed}-{arm}-pretrain"), trace));
            starts.push((arm, net, Some((on_task, on_bench)), halted));
        }
        starts.push((ARM_RANDOM, fresh_network(&cfg.network, seed)?, None, None));
        if let Some((_, _, Some((f, _)), _)) = starts.first() {
            floor_values.push((seed, *f));
        }

        // Fine-tuning phase.
        let mut seed_traces = Vec::new();
        for &lr in &ft.learning_rates {
            for (arm, net0, pre, pre_halted) in &starts {
                let mut net = net0.clone();
                let mut opts = TrainOptions::full_batch(ft.epochs);
                opts.metrics = cfg.metrics.clone();
                opts.task_id = 1;
                opts.track_zero_grad = Some(ZeroGradTracking {
                    layer,
                    burn_in_fraction: ts.burn_in_fraction,
                });
                let label = format!("seed{seed}-{arm}-{}", lr_label(lr));
                let mut trace = TrainingTrace::new(cfg.name.clone(), label.clone());
                train_supervised(&mut net, &train, Some(&test), &with_lr(&ft.optimizer, lr), &opts, &probe.inputs, &mut trace)?;

                let mut row = ReportRow::new(seed, *arm);
                row.learning_rate = Some(lr);
                row.final_test_loss = trace.final_record().and_then(|r| r.test_loss);
                if let Some(reason) = &trace.halted {
                    row.flag(format!("fine-tuning halted: {reason}"));
                }
                if let Some(reason) = pre_halted {
                    row.flag(format!("pretraining halted: {reason}"));
                }
                if let Some((on_task, on_bench)) = pre {
                    row.set_metric("pre_switch_dormant_fraction", *on_task);
                    row.set_metric("pre_switch_dormant_fraction_benchmark_probe", *on_bench);
                    if *arm == ARM_DORMANT && *on_task < ts.dormancy_floor {
                        row.flag(format!(
                            "pre-switch dormancy {on_task:.3} below the {:.2} floor",
                            ts.dormancy_floor
                        ));
                    }
                }
                let last = trace.snapshots_of("net").last();
                if let Some(s) = last {
                    row.set_metric("final_dormant_fraction", s.dormancy[layer].dormant_fraction);
                    row.set_metric("final_zero_grad_fraction", s.gradient[layer].zero_grad_fraction);
                }
                if let Some(r) = trace.final_record() {
                    row.set_metric("final_train_loss", r.train_loss);
                }
                report.rows.push(row);
                seed_traces.push(traces.len());
                traces.push((label, trace));
            }
        }

        // Persistence of the last hidden layer's zero-gradient set between
        // consecutive steps, pooled over this seed's fine-tuning runs. The
        // same overlap between consecutive metric snapshots (`cadence` steps
        // apart) is kept as a coarser diagnostic.
        let refs: Vec<&TrainingTrace> = seed_traces.iter().map(|&i| &traces[i].1).collect();
        let p = pooled_step_persistence(&refs);
        let snap = zero_grad_persistence(&refs, "net", layer, ts.burn_in_fraction)?;
        let ok = p.mean_overlap.is_some_and(|m| m >= ts.persistence_threshold);
        persistence_pass += usize::from(ok);
        persistence_detail.push(format!(
            "seed {seed}: {}/{} informative step pairs, mean {}, min {}",
            p.informative_pairs,
            p.pairs,
            fmt_opt(p.mean_overlap),
            fmt_opt(p.min_overlap)
        ));
        snapshot_detail.push(format!(
            "seed {seed}: {}/{} informative pairs, mean {}",
            snap.informative_pairs,
            snap.pairs,
            fmt_opt(snap.mean_overlap)
        ));
        for row in report.rows.iter_mut().filter(|r| r.seed == seed) {
            if let Some(m) = p.mean_overlap {
                row.set_metric("seed_zero_grad_persistence", m);
            }
            row.set_metric("seed_persistence_informative_pairs", p.informative_pairs as f64);
            if let Some(m) = snap.mean_overlap {
                row.set_metric("seed_zero_grad_persistence_snapshots", m);
            }
            row.set_metric("seed_persistence_snapshot_informative_pairs", snap.informative_pairs as f64);
        }
    }

    report.refresh_aggregates();

    // Criteria.
    let min_floor = floor_values.iter().map(|&(_, f)| f).fold(f64::INFINITY, f64::min);
    report.criteria.push(Criterion {
        name: "dormancy-floor".into(),
        passed: floor_values.iter().all(|&(_, f)| f >= ts.dormancy_floor),
        value: min_floor.is_finite().then_some(min_floor),
        threshold: ts.dormancy_floor,
        detail: floor_values
            .iter()
            .map(|(s, f)| format!("seed {s}: {f:.3}"))
            .collect::<Vec<_>>()
            .join(", "),
    });
    for &lr in &ft.learning_rates {
        let c = compare(&report.rows, ARM_DORMANT, ARM_RANDOM, Some(lr));
        report.criteria.push(Criterion {
            name: format!("mse-ratio-{}", lr_label(lr)),
            passed: c.geometric_mean_ratio.is_some_and(|r| r <= ts.max_mse_ratio),
            value: c.geometric_mean_ratio,
            threshold: ts.max_mse_ratio,
            detail: format!(
                "{} paired seeds; +-1 std bands overlap: {}{}",
                c.paired_seeds,
                c.bands_overlap.map_or("n/a".to_string(), |b| b.to_string()),
                if c.note.is_empty() { String::new() } else { format!("; {}", c.note) }
            ),
        });
        report.comparisons.push(c);
        report.comparisons.push(compare(&report.rows, ARM_BENIGN, ARM_RANDOM, Some(lr)));
        report.comparisons.push(compare(&report.rows, ARM_DORMANT, ARM_BENIGN, Some(lr)));
    }
    let need = required_seeds(cfg.seeds.len(), ts.seed_pass_fraction);
    report.criteria.push(Criterion {
        name: "zero-grad-persistence".into(),
        passed: persistence_pass >= need,
        value: Some(persistence_pass as f64),
        threshold: need as f64,
        detail: format!(
            "seeds with mean consecutive-step overlap >= {} after {}% burn-in: {persistence_pass}/{}; {}",
            ts.persistence_threshold,
            ts.burn_in_fraction * 100.0,
            cfg.seeds.len(),
            persistence_detail.join("; ")
        ),
    });
    report.notes.push(format!(
        "zero-gradient overlap between consecutive metric snapshots ({} steps apart, diagnostic): {}",
        cfg.metrics.cadence,
        snapshot_detail.join("; ")
    ));

    // Orderings of the arm means, for the record.
    for &lr in &ft.learning_rates {
        let mut means: Vec<(String, f64)> = report
            .aggregates
            .iter()
            .filter(|a| a.learning_rate == Some(lr))
            .filter_map(|a| a.mean.map(|m| (a.arm.clone(), m)))
            .collect();
        means.sort_by(|a, b| a.1.total_cmp(&b.1));
        report.notes.push(format!(
            "lr {lr}: arms by mean final test MSE: {}",
            means
                .iter()
                .map(|(a, m)| format!("{a} {m:.4}"))
                .collect::<Vec<_>>()
                .join(" < ")
        ));
    }
    Ok(ExperimentOutput { report, traces })
}

pub(crate) fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}
