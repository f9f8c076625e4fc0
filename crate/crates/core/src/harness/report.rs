//! Experiment reports: per-seed rows, per-arm aggregates, arm comparisons
//! and pass/fail criteria, plus a plain-text rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::ExperimentKind;

pub const REPORT_FORMAT: &str = "plasticity-report";

/// One (seed, arm, learning rate) outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub seed: u64,
    pub arm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_test_loss: Option<f64>,
    /// False when a precondition of the arm failed; invalid rows never enter
    /// aggregates or comparisons.
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

impl ReportRow {
    pub fn new(seed: u64, arm: impl Into<String>) -> Self {
        Self {
            seed,
            arm: arm.into(),
            learning_rate: None,
            final_test_loss: None,
            valid: true,
            flags: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    /// Records a metric; non-finite values are skipped so the report stays
    /// valid JSON.
    pub fn set_metric(&mut self, key: impl Into<String>, value: f64) {
        if value.is_finite() {
            self.metrics.insert(key.into(), value);
        }
    }

    pub fn flag(&mut self, reason: impl Into<String>) {
        self.valid = false;
        self.flags.push(reason.into());
    }
}

/// Statistics of `final_test_loss` over the valid rows of one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmAggregate {
    pub arm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    pub rows: usize,
    pub valid_rows: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation (n - 1); `None` below two rows.
    pub std: Option<f64>,
    pub geometric_mean: Option<f64>,
}

/// Geometric-mean ratio of one arm's loss to another's over paired seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub numerator: String,
    pub denominator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    pub paired_seeds: usize,
    /// `None` when a precondition failed for any seed (the arms are then not
    /// compared).
    pub geometric_mean_ratio: Option<f64>,
    /// Whether the mean ± std bands of the two arms overlap.
    pub bands_overlap: Option<bool>,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub passed: bool,
    /// Observed value; `None` when it could not be computed.
    pub value: Option<f64>,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format: String,
    pub kind: ExperimentKind,
    pub name: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<ArmAggregate>,
    pub comparisons: Vec<Comparison>,
    pub criteria: Vec<Criterion>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn new(kind: ExperimentKind, name: &str, seeds: &[u64]) -> Self {
        Self {
            format: REPORT_FORMAT.into(),
            kind,
            name: name.into(),
            seeds: seeds.to_vec(),
            rows: Vec::new(),
            aggregates: Vec::new(),
            comparisons: Vec::new(),
            criteria: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// Recomputes `aggregates` from `rows`.
    pub fn refresh_aggregates(&mut self) {
        self.aggregates = aggregate(&self.rows);
    }

    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn criterion(&self, name: &str) -> Option<&Criterion> {
        self.criteria.iter().find(|c| c.name == name)
    }

    /// Plain-text summary: per-arm table, comparisons, criteria and notes.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        writeln!(w, "experiment: {} ({})", self.name, self.kind.name()).unwrap();
        writeln!(w, "seeds: {:?}", self.seeds).unwrap();
        if !self.aggregates.is_empty() {
            writeln!(w).unwrap();
            writeln!(
                w,
                "{:<22} {:>8} {:>6} {:>12} {:>12} {:>12}",
                "arm", "lr", "valid", "mean", "std", "geo-mean"
            )
            .unwrap();
            for a in &self.aggregates {
                writeln!(
                    w,
                    "{:<22} {:>8} {:>6} {:>12} {:>12} {:>12}",
                    a.arm,
                    opt(a.learning_rate),
                    format!("{}/{}", a.valid_rows, a.rows),
                    opt(a.mean),
                    opt(a.std),
                    opt(a.geometric_mean)
                )
                .unwrap();
            }
        }
        if !self.comparisons.is_empty() {
            writeln!(w).unwrap();
            for c in &self.comparisons {
                writeln!(
                    w,
                    "ratio {} / {} at lr {}: {} over {} seeds; bands overlap: {}{}",
                    c.numerator,
                    c.denominator,
                    opt(c.learning_rate),
                    opt(c.geometric_mean_ratio),
                    c.paired_seeds,
                    c.bands_overlap.map_or("n/a".to_string(), |b| b.to_string()),
                    if c.note.is_empty() { String::new() } else { format!("; {}", c.note) }
                )
                .unwrap();
            }
        }
        let flagged: Vec<&ReportRow> = self.rows.iter().filter(|r| !r.valid).collect();
        if !flagged.is_empty() {
            writeln!(w).unwrap();
            writeln!(w, "flagged rows (excluded from aggregates and comparisons):").unwrap();
            for r in flagged {
                writeln!(w, "  seed {} {} lr {}: {}", r.seed, r.arm, opt(r.learning_rate), r.flags.join("; ")).unwrap();
            }
        }
        if !self.criteria.is_empty() {
            writeln!(w).unwrap();
            for c in &self.criteria {
                writeln!(
                    w,
                    "[{}] {}: {} (threshold {}) {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value.map_or_else(|| "n/a".to_string(), fmt_num),
                    fmt_num(c.threshold),
                    c.detail
                )
                .unwrap();
            }
        }
        if !self.notes.is_empty() {
            writeln!(w).unwrap();
            for n in &self.notes {
                writeln!(w, "note: {n}").unwrap();
            }
        }
        out
    }
}

fn fmt_num(x: f64) -> String {
    if x == 0.0 || (1e-3..1e6).contains(&x.abs()) {
        format!("{x:.4}")
    } else {
        format!("{x:.4e}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or("-".to_string(), fmt_num)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

/// Geometric mean of positive values; `None` if empty or any value is not
/// positive.
pub fn geometric_mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() || xs.iter().any(|x| !(*x > 0.0)) {
        return None;
    }
    Some((xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp())
}

/// Per-(arm, learning rate) aggregates, in first-appearance order.
pub fn aggregate(rows: &[ReportRow]) -> Vec<ArmAggregate> {
    let mut keys: Vec<(String, Option<u64>)> = Vec::new();
    for r in rows {
        let k = (r.arm.clone(), r.learning_rate.map(f64::to_bits));
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(arm, lr_bits)| {
            let lr = lr_bits.map(f64::from_bits);
            let group: Vec<&ReportRow> = rows
                .iter()
                .filter(|r| r.arm == arm && r.learning_rate.map(f64::to_bits) == lr_bits)
                .collect();
            let losses: Vec<f64> = group
                .iter()
                .filter(|r| r.valid)
                .filter_map(|r| r.final_test_loss)
                .collect();
            let (mean, std) = mean_std(&losses);
            ArmAggregate {
                arm,
                learning_rate: lr,
                rows: group.len(),
                valid_rows: group.iter().filter(|r| r.valid).count(),
                mean,
                std,
                geometric_mean: geometric_mean(&losses),
            }
        })
        .collect()
}

/// Compares `numerator` against `denominator` at one learning rate over the
/// seeds both ran. Any invalid row on either side means the arms are not
/// compared.
pub fn compare(rows: &[ReportRow], numerator: &str, denominator: &str, lr: Option<f64>) -> Comparison {
    let find = |arm: &str, seed: u64| {
        rows.iter().find(|r| {
            r.arm == arm && r.seed == seed && r.learning_rate.map(f64::to_bits) == lr.map(f64::to_bits)
        })
    };
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut ratios = Vec::new();
    let mut invalid = Vec::new();
    let (mut num_losses, mut den_losses) = (Vec::new(), Vec::new());
    for s in seeds {
        let (Some(a), Some(b)) = (find(numerator, s), find(denominator, s)) else {
            continue;
        };
        if !a.valid || !b.valid {
            invalid.push(s);
            continue;
        }
        if let (Some(x), Some(y)) = (a.final_test_loss, b.final_test_loss) {
            ratios.push(x / y);
            num_losses.push(x);
            den_losses.push(y);
        }
    }
    let paired = ratios.len() + invalid.len();
    if !invalid.is_empty() {
        return Comparison {
            numerator: numerator.into(),
            denominator: denominator.into(),
            learning_rate: lr,
            paired_seeds: paired,
            geometric_mean_ratio: None,
            bands_overlap: None,
            note: format!("not compared: precondition failed for seeds {invalid:?}"),
        };
    }
    let (ma, sa) = mean_std(&num_losses);
    let (mb, sb) = mean_std(&den_losses);
    let bands_overlap = match (ma, sa, mb, sb) {
        (Some(ma), Some(sa), Some(mb), Some(sb)) => Some(ma - sa <= mb + sb && mb - sb <= ma + sa),
        _ => None,
    };
    Comparison {
        numerator: numerator.into(),
        denominator: denominator.into(),
        learning_rate: lr,
        paired_seeds: paired,
        geometric_mean_ratio: geometric_mean(&ratios),
        bands_overlap,
        note: String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, arm: &str, loss: f64) -> ReportRow {
        ReportRow {
            final_test_loss: Some(loss),
            learning_rate: Some(0.01),
            ..ReportRow::new(seed, arm)
        }
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let rows = vec![row(0, "a", 1.0), row(1, "a", 4.0), row(0, "b", 2.0), row(1, "b", 2.0)];
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].mean, Some(2.5));
        assert_eq!(agg[0].geometric_mean, Some(2.0));
        assert!((agg[0].std.unwrap() - 4.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(agg[1].std, Some(0.0));
    }

    #[test]
    fn geometric_mean_ratio() {
        let rows = vec![row(0, "a", 1.0), row(1, "a", 4.0), row(0, "b", 2.0), row(1, "b", 2.0)];
        let c = compare(&rows, "a", "b", Some(0.01));
        assert_eq!(c.paired_seeds, 2);
        assert!((c.geometric_mean_ratio.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(c.bands_overlap, Some(true));
    }

    #[test]
    fn invalid_rows_block_the_comparison() {
        let mut bad = row(1, "a", 4.0);
        bad.flag("dormancy floor not reached");
        let rows = vec![row(0, "a", 1.0), bad, row(0, "b", 2.0), row(1, "b", 2.0)];
        let c = compare(&rows, "a", "b", Some(0.01));
        assert_eq!(c.geometric_mean_ratio, None);
        assert!(c.note.contains("[1]"));
        let agg = aggregate(&rows);
        assert_eq!(agg[0].valid_rows, 1);
        assert_eq!(agg[0].mean, Some(1.0));
    }

    #[test]
    fn text_lists_flags_and_criteria() {
        let mut r = ExperimentReport::new(ExperimentKind::TaskSwitch, "t", &[0]);
        let mut bad = row(0, "a", 1.0);
        bad.flag("why");
        r.rows.push(bad);
        r.refresh_aggregates();
        r.criteria.push(Criterion {
            name: "c".into(),
            passed: false,
            value: Some(2.0),
            threshold: 1.5,
            detail: String::new(),
        });
        let t = r.to_text();
        assert!(t.contains("flagged rows"));
        assert!(t.contains("[FAIL] c"));
    }
}
