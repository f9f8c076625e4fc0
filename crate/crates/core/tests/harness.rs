use plasticity::harness::{
    aggregate, dormancy_normalization_error, geometric_mean, mean_std, pooled_step_persistence, run_experiment, write_outputs,
    zero_grad_persistence, ExperimentConfig, ExperimentKind, ExperimentReport,
};
use plasticity::trace::TrainingTrace;
use proptest::prelude::*;
use serde_json::Value;

fn tiny(kind: ExperimentKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(kind);
    cfg.name = format!("tiny-{}", kind.name());
    cfg.seeds = vec![0, 1];
    cfg.network.hidden = vec![8, 8];
    cfg.metrics.cadence = 10;
    cfg.metrics.probe_size = 32;
    cfg.metrics.ranks = false;
    let ts = &mut cfg.task_switch;
    ts.pretrain.steps = 100;
    ts.pretrain.samples = 256;
    ts.finetune.epochs = 30;
    ts.finetune.train_samples = 64;
    ts.finetune.test_samples = 64;
    let pc = &mut cfg.perturbation;
    pc.pretrain.steps = 100;
    pc.pretrain.samples = 256;
    pc.continue_steps = 50;
    cfg
}

#[test]
fn tiny_task_switch_is_deterministic() {
    let cfg = tiny(ExperimentKind::TaskSwitch);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.traces.len(), b.traces.len());
    for ((la, ta), (lb, tb)) in a.traces.iter().zip(&b.traces) {
        assert_eq!(la, lb);
        assert_eq!(ta.to_jsonl().unwrap(), tb.to_jsonl().unwrap());
        assert_eq!(ta.to_summary_csv().unwrap(), tb.to_summary_csv().unwrap());
    }
    // 2 seeds x 3 arms x 2 learning rates.
    assert_eq!(a.report.rows.len(), 12);
    for name in ["dormancy-floor", "mse-ratio-lr0.01", "mse-ratio-lr0.005", "zero-grad-persistence"] {
        assert!(a.report.criterion(name).is_some(), "missing criterion {name}");
    }
}

#[test]
fn random_init_arm_is_reproducible_across_seed_lists() {
    // A seed's runs do not depend on which other seeds are in the list.
    let mut one = tiny(ExperimentKind::TaskSwitch);
    one.seeds = vec![1];
    let both = run_experiment(&tiny(ExperimentKind::TaskSwitch)).unwrap();
    let single = run_experiment(&one).unwrap();
    for (label, trace) in &single.traces {
        let (_, other) = both.traces.iter().find(|(l, _)| l == label).expect("label present");
        assert_eq!(trace.to_summary_csv().unwrap(), other.to_summary_csv().unwrap(), "{label}");
    }
}

#[test]
fn aggregates_are_recomputable_from_rows() {
    let out = run_experiment(&tiny(ExperimentKind::TaskSwitch)).unwrap();
    let report = &out.report;
    assert_eq!(report.aggregates, aggregate(&report.rows));
    for agg in &report.aggregates {
        let losses: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.arm == agg.arm && r.learning_rate == agg.learning_rate && r.valid)
            .filter_map(|r| r.final_test_loss)
            .collect();
        let n = losses.len() as f64;
        let mean = losses.iter().sum::<f64>() / n;
        let std = (losses.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let gm = (losses.iter().map(|x| x.ln()).sum::<f64>() / n).exp();
        assert!((agg.mean.unwrap() - mean).abs() <= 1e-9 * mean.abs());
        assert!((agg.std.unwrap() - std).abs() <= 1e-9 * std.max(1e-300));
        assert!((agg.geometric_mean.unwrap() - gm).abs() <= 1e-9 * gm);
    }
}

#[test]
fn every_snapshot_is_normalized() {
    let out = run_experiment(&tiny(ExperimentKind::TaskSwitch)).unwrap();
    let traces: Vec<&TrainingTrace> = out.traces.iter().map(|(_, t)| t).collect();
    let (worst, n) = dormancy_normalization_error(&traces);
    assert!(n > 0);
    assert!(worst <= 1e-9, "worst deviation {worst:e}");
}

#[test]
fn persistence_is_computed_on_fine_tune_traces() {
    let out = run_experiment(&tiny(ExperimentKind::TaskSwitch)).unwrap();
    let ft: Vec<&TrainingTrace> = out
        .traces
        .iter()
        .filter(|(l, _)| l.starts_with("seed0-") && !l.ends_with("pretrain"))
        .map(|(_, t)| t)
        .collect();
    assert_eq!(ft.len(), 6);
    let stats = zero_grad_persistence(&ft, "net", 1, 0.1).unwrap();
    assert!(stats.pairs > 0);
    if let Some(m) = stats.mean_overlap {
        assert!((0.0..=1.0).contains(&m));
    }
    // Every-step tallies: 30 epochs with a 10% burn-in give 27 pairs per run.
    let steps = pooled_step_persistence(&ft);
    assert_eq!(steps.pairs, 6 * 27);
    let row = out.report.rows.iter().find(|r| r.seed == 0).unwrap();
    assert_eq!(row.metrics["seed_persistence_informative_pairs"], steps.informative_pairs as f64);
    if let Some(m) = steps.mean_overlap {
        assert!((0.0..=1.0).contains(&m));
        assert_eq!(row.metrics["seed_zero_grad_persistence"], m);
    }
}

#[test]
fn tiny_perturbation_has_identity_and_ratio_criteria() {
    let cfg = tiny(ExperimentKind::Perturbation);
    let out = run_experiment(&cfg).unwrap();
    assert!(out.report.criterion("eta-zero-identity").unwrap().passed);
    assert!(out.report.criterion("perturbed-loss-ratio").is_some());
    let again = run_experiment(&cfg).unwrap();
    assert_eq!(out.report, again.report);
}

#[test]
fn run_directory_files_and_schemas() {
    let cfg = tiny(ExperimentKind::TaskSwitch);
    let out = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &cfg, &out).unwrap();

    // Config and report round-trip.
    let back = ExperimentConfig::load(dir.path().join("config.toml")).unwrap();
    assert_eq!(back, cfg);
    let report: ExperimentReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report, out.report);
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["format"], "plasticity-run-manifest");
    assert_eq!(manifest["kind"], "task-switch");

    // Summary CSV: fixed leading columns, then four per network layer.
    let csv = std::fs::read_to_string(dir.path().join("traces/seed0-random-init-lr0.01.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let header: Vec<String> = rdr.headers().unwrap().iter().map(str::to_string).collect();
    let mut expected = vec!["step", "task", "train_loss", "test_loss"]
        .into_iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    for l in 0..3 {
        for col in ["dormant_fraction", "zero_grad_fraction", "dormant_overlap", "zero_grad_overlap"] {
            expected.push(format!("net_l{l}_{col}"));
        }
    }
    assert_eq!(header, expected);
    let mut steps = Vec::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        assert_eq!(rec.len(), header.len());
        steps.push(rec[0].parse::<usize>().unwrap());
        assert!(rec[2].parse::<f64>().unwrap().is_finite());
        assert!(rec[3].parse::<f64>().unwrap().is_finite());
        let frac: f64 = rec[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&frac));
    }
    assert_eq!(steps.first(), Some(&0));
    assert_eq!(steps.last(), Some(&30));
    assert!(steps.windows(2).all(|w| w[0] < w[1]));

    // JSONL: step records, then per-layer reports with a fixed key set.
    let jsonl = std::fs::read_to_string(dir.path().join("traces/seed0-random-init-lr0.01.jsonl")).unwrap();
    let mut kinds = std::collections::BTreeSet::new();
    for line in jsonl.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let kind = v["kind"].as_str().unwrap().to_string();
        assert_eq!(v["run"], "seed0-random-init-lr0.01");
        assert_eq!(v["experiment"], cfg.name.as_str());
        match kind.as_str() {
            "step" => {
                let r = &v["record"];
                assert!(r["step"].is_u64() && r["train_loss"].is_f64() && r["snapshots"].is_array());
            }
            "dormancy" => {
                for key in ["network", "step", "task", "layer"] {
                    assert!(!v[key].is_null(), "{key} missing");
                }
                let r = &v["report"];
                for key in ["scores", "mean_abs", "dormant_mask", "dormant_fraction", "degenerate", "tau_d"] {
                    assert!(!r[key].is_null(), "dormancy.{key} missing");
                }
            }
            "magi" => {
                for key in ["magi", "zero_grad_mask", "zero_grad_fraction", "tau_g"] {
                    assert!(!v["report"][key].is_null(), "magi.{key} missing");
                }
            }
            "weights" => assert!(v["report"].is_object()),
            "zero_grad_step_overlap" => {
                for key in ["layer", "from_step", "pairs", "informative_pairs", "coefficient_sum"] {
                    assert!(!v["report"][key].is_null(), "zero_grad_step_overlap.{key} missing");
                }
            }
            other => panic!("unexpected line kind {other}"),
        }
        kinds.insert(kind);
    }
    assert_eq!(
        kinds.into_iter().collect::<Vec<_>>(),
        ["dormancy", "magi", "step", "weights", "zero_grad_step_overlap"]
    );
}

#[test]
fn config_rejects_unknown_keys_and_wrong_versions() {
    let text = ExperimentConfig::new(ExperimentKind::TaskSwitch).to_toml().unwrap();
    assert!(ExperimentConfig::from_toml(&format!("bogus = 1\n{text}")).is_err());
    let wrong = text.replacen("version = 1", "version = 99", 1);
    assert!(ExperimentConfig::from_toml(&wrong).and_then(|c| c.validate()).is_err());
}

#[test]
fn summary_statistics_examples() {
    assert_eq!(mean_std(&[1.0, 3.0]), (Some(2.0), Some(2.0f64.sqrt())));
    assert_eq!(mean_std(&[4.0]), (Some(4.0), None));
    assert!((geometric_mean(&[1.0, 4.0]).unwrap() - 2.0).abs() <= 1e-15);
    assert_eq!(geometric_mean(&[1.0, 0.0]), None);
}

fn kind() -> impl Strategy<Value = ExperimentKind> {
    prop_oneof![
        Just(ExperimentKind::TaskSwitch),
        Just(ExperimentKind::PpoDormancy),
        Just(ExperimentKind::Perturbation),
        Just(ExperimentKind::EquivalenceSuite),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips_through_toml(
        kind in kind(),
        seeds in prop::collection::vec(any::<u32>(), 1..6),
        hidden in prop::collection::vec(1usize..128, 1..4),
        cadence in 1usize..500,
        tau_d in 0.0f64..0.5,
        lr in 1e-5f64..1.0,
        eta in 0.0f64..2.0,
    ) {
        let mut cfg = ExperimentConfig::new(kind);
        cfg.seeds = seeds.into_iter().map(u64::from).collect();
        cfg.network.hidden = hidden;
        cfg.metrics.cadence = cadence;
        cfg.metrics.tau_d = tau_d;
        cfg.task_switch.finetune.learning_rates = vec![lr, lr / 2.0];
        cfg.perturbation.eta = eta;
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml().unwrap(), text);
    }
}
