//! Executable checks of the metric theory and of the autodiff engine.
//!
//! [`run_equivalence_suite`] evaluates the batch form of the
//! dormancy / zero-gradient equivalence at exact thresholds on three
//! families of ReLU networks; [`run_gradient_check_suite`] compares tape
//! gradients with central finite differences on random small networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::gradcheck::{finite_difference_check, min_abs_preactivation};
use crate::metrics::equivalence_check;
use crate::nn::{init_network, init_network_with, Activation, MlpNetwork};
use crate::tasks::PretrainKind;
use crate::trace::TrainingTrace;
use crate::Tensor;

use super::{
    derive_seed, fresh_network, pretrain, pretrain_data, Criterion, ExperimentConfig, ExperimentOutput,
    ExperimentReport, ReportRow,
};

#[derive(Default)]
struct FamilyTally {
    nets: usize,
    layers: usize,
    violations: usize,
    /// Violations the exact statement does not cover (see
    /// [`crate::metrics::Violation::in_exact_scope`]).
    out_of_scope: usize,
    dormant: usize,
    zero_grad: usize,
    nonempty_layers: usize,
    min_overlap: Option<f64>,
}

impl FamilyTally {
    fn check(&mut self, net: &MlpNetwork, batch: &Tensor) -> Result<()> {
        self.nets += 1;
        for l in 0..net.layers.len() - 1 {
            let r = equivalence_check(net, batch, l, 0.0, 0.0)?;
            self.layers += 1;
            let in_scope = r.exact_scope_violations().count();
            self.violations += in_scope;
            self.out_of_scope += r.violations.len() - in_scope;
            self.dormant += r.overlap.set_a_size;
            self.zero_grad += r.overlap.set_b_size;
            if !r.overlap.degenerate {
                self.nonempty_layers += 1;
                let c = r.overlap.coefficient;
                self.min_overlap = Some(self.min_overlap.map_or(c, |m| m.min(c)));
            }
        }
        Ok(())
    }

    fn row(&self, seed: u64, arm: &str) -> ReportRow {
        let mut row = ReportRow::new(seed, arm);
        for (k, v) in [
            ("nets", self.nets),
            ("layers", self.layers),
            ("violations", self.violations),
            ("out_of_scope_violations", self.out_of_scope),
            ("dormant_neurons", self.dormant),
            ("zero_grad_neurons", self.zero_grad),
            ("non_degenerate_layers", self.nonempty_layers),
        ] {
            row.set_metric(k, v as f64);
        }
        if let Some(m) = self.min_overlap {
            row.set_metric("min_overlap", m);
        }
        row
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random ReLU net with random biases; about one neuron in five gets a large
/// negative bias so that it is dead on most inputs, and a few batch rows are
/// all zeros.
fn random_relu_case(seed: u64) -> Result<(MlpNetwork, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=3);
    let mut widths = vec![rng.random_range(2..=6)];
    for _ in 0..depth {
        widths.push(rng.random_range(2..=12));
    }
    widths.push(rng.random_range(1..=3));
    let mut net = init_network(&widths, Activation::Relu, rng.random())?;
    for layer in &mut net.layers {
        for b in layer.bias.data_mut() {
            *b = if rng.random_bool(0.2) { -10.0 - 5.0 * rng.random::<f64>() } else { 0.5 * normal(&mut rng) };
        }
    }
    let n = rng.random_range(4..=32);
    let d = widths[0];
    let mut x = Vec::with_capacity(n * d);
    for _ in 0..n {
        let zero = rng.random_bool(0.1);
        for _ in 0..d {
            x.push(if zero { 0.0 } else { normal(&mut rng) });
        }
    }
    Ok((net, Tensor::matrix(n, d, x)?))
}

/// ReLU net with positive inputs, non-negative weights and positive biases,
/// so every hidden neuron is active on every row: both sets must be empty.
fn all_active_case(seed: u64) -> Result<(MlpNetwork, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = [rng.random_range(2..=6), rng.random_range(2..=10), rng.random_range(2..=10), 1];
    let mut net = init_network(&widths, Activation::Relu, rng.random())?;
    for layer in &mut net.layers {
        for w in layer.weights.data_mut() {
            *w = w.abs();
        }
        for b in layer.bias.data_mut() {
            *b = rng.random_range(0.5..1.5);
        }
    }
    let n = rng.random_range(4..=32);
    let x: Vec<f64> = (0..n * widths[0]).map(|_| rng.random_range(0.5..1.0)).collect();
    Ok((net, Tensor::matrix(n, widths[0], x)?))
}

pub fn run_equivalence_suite(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ec = &cfg.equivalence;
    let base = cfg.seeds[0];
    let seed_of = |i: usize| cfg.seeds[i % cfg.seeds.len()];
    let mut report = ExperimentReport::new(cfg.kind, &cfg.name, &cfg.seeds);
    let mut traces = Vec::new();

    let mut random = FamilyTally::default();
    for i in 0..ec.random_nets {
        let (net, x) = random_relu_case(derive_seed(seed_of(i), &format!("random-net-{i}")))?;
        random.check(&net, &x)?;
    }
    let mut active = FamilyTally::default();
    for i in 0..ec.identity_nets {
        let (net, x) = all_active_case(derive_seed(seed_of(i), &format!("active-net-{i}")))?;
        active.check(&net, &x)?;
    }
    let mut trained = FamilyTally::default();
    for i in 0..ec.trained_nets {
        let seed = derive_seed(seed_of(i), &format!("trained-net-{i}"));
        let data = pretrain_data(PretrainKind::DormancyInducing, seed, &ec.pretrain, ec.probe_size)?;
        let mut net = fresh_network(&cfg.network, seed)?;
        let mut trace = TrainingTrace::new(cfg.name.clone(), format!("trained-net-{i}"));
        let mut metrics = cfg.metrics.clone();
        metrics.ranks = false;
        pretrain(&mut net, &data, &ec.pretrain, &metrics, seed, &mut trace)?;
        trained.check(&net, &data.probe.inputs)?;
        traces.push((format!("trained-net-{i}"), trace));
    }

    for (arm, t) in [("random-relu", &random), ("all-active", &active), ("trained-dormancy", &trained)] {
        report.rows.push(t.row(base, arm));
    }
    let total = random.violations + active.violations + trained.violations;
    report.criteria.push(Criterion {
        name: "equivalence-violations".into(),
        passed: total == 0,
        value: Some(total as f64),
        threshold: 0.0,
        detail: format!(
            "{} random, {} all-active and {} trained nets at tau_d = tau_g = 0; dormant neurons checked: {} / {} / {}",
            random.nets, active.nets, trained.nets, random.dormant, active.dormant, trained.dormant
        ),
    });
    let nonempty = active.dormant + active.zero_grad;
    report.criteria.push(Criterion {
        name: "all-active-sets-empty".into(),
        passed: nonempty == 0,
        value: Some(nonempty as f64),
        threshold: 0.0,
        detail: "every hidden neuron active on every row: no dormant or zero-gradient neurons expected".into(),
    });
    report.notes.push(format!(
        "violations outside the exact statement (non-strict preactivations, or activity only on zero-input rows): {}",
        random.out_of_scope + active.out_of_scope + trained.out_of_scope
    ));
    Ok(ExperimentOutput { report, traces })
}

/// Parameters of [`run_gradient_check_suite`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientSuiteConfig {
    pub nets: usize,
    pub seed: u64,
    pub epsilon: f64,
    /// Tolerance for tanh networks.
    pub smooth_tolerance: f64,
    /// Tolerance for ReLU networks away from kinks.
    pub relu_tolerance: f64,
    /// Minimum `|preactivation|` for a ReLU case to count as away from kinks.
    pub min_kink_distance: f64,
}

impl Default for GradientSuiteConfig {
    fn default() -> Self {
        Self {
            nets: 200,
            seed: 0,
            epsilon: 1e-6,
            smooth_tolerance: 1e-5,
            relu_tolerance: 1e-4,
            min_kink_distance: 1e-3,
        }
    }
}

/// Outcome of [`run_gradient_check_suite`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientSuiteReport {
    pub smooth_nets: usize,
    pub relu_nets: usize,
    pub max_smooth_error: f64,
    pub max_relu_error: f64,
    /// ReLU batches redrawn because a preactivation was too close to 0.
    pub redrawn_batches: usize,
    pub passed: bool,
}

/// Checks tape gradients of an MSE loss against central finite differences
/// on `cfg.nets` random small networks, alternating tanh and ReLU.
pub fn run_gradient_check_suite(cfg: &GradientSuiteConfig) -> Result<GradientSuiteReport> {
    let mut out = GradientSuiteReport {
        smooth_nets: 0,
        relu_nets: 0,
        max_smooth_error: 0.0,
        max_relu_error: 0.0,
        redrawn_batches: 0,
        passed: false,
    };
    for i in 0..cfg.nets {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("gradcheck-{i}")));
        let act = if i % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let depth = rng.random_range(1..=2);
        let mut widths = vec![rng.random_range(1..=4)];
        for _ in 0..depth {
            widths.push(rng.random_range(1..=5));
        }
        widths.push(rng.random_range(1..=2));
        let mut acts = vec![act; widths.len() - 1];
        *acts.last_mut().expect("at least one layer") = Activation::Identity;
        let mut net = init_network_with(&widths, &acts, rng.random())?;
        for b in net.layers.iter_mut().flat_map(|l| l.bias.data_mut().iter_mut()) {
            *b = 0.3 * normal(&mut rng);
        }
        let n = rng.random_range(2..=6);
        let draw = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
            Tensor::matrix(n, widths[0], (0..n * widths[0]).map(|_| normal(rng)).collect())
        };
        let mut x = draw(&mut rng)?;
        if act == Activation::Relu {
            while min_abs_preactivation(&net, &x)? <= cfg.min_kink_distance {
                if out.redrawn_batches >= 100 * cfg.nets {
                    return Err(crate::Error::InvalidArgument("could not draw batches away from ReLU kinks".into()));
                }
                out.redrawn_batches += 1;
                x = draw(&mut rng)?;
            }
        }
        let k = *widths.last().expect("widths");
        let y = Tensor::matrix(n, k, (0..n * k).map(|_| normal(&mut rng)).collect())?;
        let report = finite_difference_check(
            &net,
            |tape, o| {
                let t = tape.constant(y.clone())?;
                tape.mse(o, t)
            },
            &x,
            cfg.epsilon,
        )?;
        if act == Activation::Relu {
            out.relu_nets += 1;
            out.max_relu_error = out.max_relu_error.max(report.max_rel_error);
        } else {
            out.smooth_nets += 1;
            out.max_smooth_error = out.max_smooth_error.max(report.max_rel_error);
        }
    }
    out.passed = out.max_smooth_error <= cfg.smooth_tolerance && out.max_relu_error <= cfg.relu_tolerance;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ExperimentKind;

    #[test]
    fn all_active_nets_have_empty_sets() {
        for s in 0..5 {
            let (net, x) = all_active_case(s).unwrap();
            let mut t = FamilyTally::default();
            t.check(&net, &x).unwrap();
            assert_eq!((t.dormant, t.zero_grad, t.violations), (0, 0, 0));
        }
    }

    #[test]
    fn random_cases_contain_dead_neurons() {
        let mut t = FamilyTally::default();
        for s in 0..20 {
            let (net, x) = random_relu_case(s).unwrap();
            t.check(&net, &x).unwrap();
        }
        assert!(t.dormant > 0);
        assert_eq!(t.violations, 0);
    }

    #[test]
    fn small_suite_passes() {
        let mut cfg = ExperimentConfig::new(ExperimentKind::EquivalenceSuite);
        cfg.network.hidden = vec![8, 8];
        cfg.equivalence.random_nets = 10;
        cfg.equivalence.identity_nets = 2;
        cfg.equivalence.trained_nets = 1;
        cfg.equivalence.pretrain.steps = 100;
        cfg.equivalence.pretrain.samples = 128;
        cfg.equivalence.probe_size = 32;
        let out = run_equivalence_suite(&cfg).unwrap();
        assert!(out.report.all_passed(), "{}", out.report.to_text());
        assert_eq!(out.traces.len(), 1);
    }

    #[test]
    fn small_gradient_suite_passes() {
        let r = run_gradient_check_suite(&GradientSuiteConfig {
            nets: 20,
            ..Default::default()
        })
        .unwrap();
        assert_eq!((r.smooth_nets, r.relu_nets), (10, 10));
        assert!(r.passed, "{r:?}");
    }
}
