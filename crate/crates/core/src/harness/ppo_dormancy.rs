//! Dormancy tracking during PPO on the point-mass environment.
//!
//! Each seed trains one PPO agent. The criterion series are the dormant and
//! zero-gradient fractions of the value network's last hidden layer, one
//! point per iteration; the policy network and two diagnostics (the series
//! after a burn-in, and the sets at exact zero thresholds) are reported
//! alongside.

use crate::error::Result;
use crate::ppo::{pearson, ppo_train};
use crate::trace::{SetKind, TrainingTrace};

use super::task_switch::fmt_opt;
use super::{exact_fraction_series, required_seeds, Criterion, ExperimentConfig, ExperimentOutput, ExperimentReport, ReportRow};

/// Fraction of the series dropped by the burn-in diagnostic.
const DIAGNOSTIC_BURN_IN: f64 = 0.1;

struct Correlations {
    whole: Option<f64>,
    after_burn_in: Option<f64>,
    exact: Option<f64>,
}

fn correlations(trace: &TrainingTrace, network: &str, layer: usize) -> Result<Correlations> {
    let d = trace.fraction_series(network, SetKind::Dormant, layer)?;
    let g = trace.fraction_series(network, SetKind::ZeroGrad, layer)?;
    let skip = (d.len() as f64 * DIAGNOSTIC_BURN_IN).ceil() as usize;
    let ed = exact_fraction_series(trace, network, layer, SetKind::Dormant);
    let eg = exact_fraction_series(trace, network, layer, SetKind::ZeroGrad);
    Ok(Correlations {
        whole: pearson(&d, &g),
        after_burn_in: pearson(&d[skip.min(d.len())..], &g[skip.min(g.len())..]),
        exact: pearson(&ed, &eg),
    })
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn run_ppo_dormancy(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let pc = &cfg.ppo_dormancy;
    let layer = pc.ppo.hidden.len() - 1;
    let mut report = ExperimentReport::new(cfg.kind, &cfg.name, &cfg.seeds);
    let mut traces = Vec::new();
    let mut passes = 0;
    let mut details = Vec::new();
    let mut policy_details = Vec::new();

    for &seed in &cfg.seeds {
        let mut run = ppo_train(&pc.ppo, seed, &cfg.metrics)?;
        run.trace.experiment_id = cfg.name.clone();
        let value = correlations(&run.trace, "value", layer)?;
        let policy = correlations(&run.trace, "policy", layer)?;
        let ok = value.whole.is_some_and(|r| r >= pc.min_correlation);
        passes += usize::from(ok);
        details.push(format!("seed {seed}: {}", fmt_opt(value.whole)));
        policy_details.push(format!("seed {seed}: {}", fmt_opt(policy.whole)));

        let mut row = ReportRow::new(seed, "ppo");
        let returns: Vec<f64> = run.trace.records.iter().filter_map(|r| r.episodic_return).collect();
        let tenth = (returns.len() / 10).max(1);
        for (key, v) in [
            ("pearson_value", value.whole),
            ("pearson_value_after_burn_in", value.after_burn_in),
            ("pearson_value_exact_threshold", value.exact),
            ("pearson_policy", policy.whole),
            ("pearson_policy_after_burn_in", policy.after_burn_in),
            ("pearson_policy_exact_threshold", policy.exact),
            ("first_return", mean(&returns[..tenth.min(returns.len())])),
            ("final_return", mean(&returns[returns.len().saturating_sub(tenth)..])),
        ] {
            if let Some(v) = v {
                row.set_metric(key, v);
            }
        }
        if let Some(s) = run.trace.snapshots_of("value").last() {
            row.set_metric("final_value_dormant_fraction", s.dormancy[layer].dormant_fraction);
            row.set_metric("final_value_zero_grad_fraction", s.gradient[layer].zero_grad_fraction);
        }
        if let Some(reason) = &run.trace.halted {
            row.flag(format!("training halted: {reason}"));
        }
        report.rows.push(row);
        traces.push((format!("seed{seed}"), run.trace));
    }

    report.refresh_aggregates();
    let need = required_seeds(cfg.seeds.len(), pc.seed_pass_fraction);
    report.criteria.push(Criterion {
        name: "ppo-correlation-value".into(),
        passed: passes >= need,
        value: Some(passes as f64),
        threshold: need as f64,
        detail: format!(
            "seeds with Pearson(dormant, zero-grad) >= {} on the value network's last hidden layer: {passes}/{}; {}",
            pc.min_correlation,
            cfg.seeds.len(),
            details.join(", ")
        ),
    });
    report.notes.push(format!(
        "policy network last hidden layer Pearson: {}",
        policy_details.join(", ")
    ));
    report.notes.push(format!(
        "diagnostics per seed: correlation after a {}% burn-in and at exact zero thresholds are in the row metrics",
        DIAGNOSTIC_BURN_IN * 100.0
    ));
    Ok(ExperimentOutput { report, traces })
}
