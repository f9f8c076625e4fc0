//! Training traces: per-step loss records and metric snapshots, plus their
//! JSONL and CSV forms.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    self, dormancy_index, magi_with_target, overlap_masks, rank_stats, weight_stats, DormancyReport,
    GradientIntensityReport, MagiTarget, OverlapReport, RankStats, WeightStats,
};
use crate::nn::MlpNetwork;
use crate::tensor::Tensor;

/// Metric thresholds and cadence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    #[serde(default = "default_cadence")]
    pub cadence: usize,
    #[serde(default = "default_tau_d")]
    pub tau_d: f64,
    #[serde(default = "default_tau_g")]
    pub tau_g: f64,
    #[serde(default = "default_delta")]
    pub rank_delta: f64,
    #[serde(default)]
    pub magi_target: MagiTarget,
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
    /// Also compute singular-value statistics (the costliest metric).
    #[serde(default = "default_true")]
    pub ranks: bool,
}

fn default_cadence() -> usize {
    50
}
fn default_tau_d() -> f64 {
    metrics::DEFAULT_TAU_D
}
fn default_tau_g() -> f64 {
    metrics::DEFAULT_TAU_G
}
fn default_delta() -> f64 {
    metrics::DEFAULT_RANK_DELTA
}
fn default_probe_size() -> usize {
    256
}
fn default_true() -> bool {
    true
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            cadence: default_cadence(),
            tau_d: default_tau_d(),
            tau_g: default_tau_g(),
            rank_delta: default_delta(),
            magi_target: MagiTarget::Post,
            probe_size: default_probe_size(),
            ranks: true,
        }
    }
}

/// All metrics of one network at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub id: usize,
    pub step: usize,
    pub task_id: usize,
    /// Which network of the run this describes (`net`, `policy`, `value`).
    pub network: String,
    pub dormancy: Vec<DormancyReport>,
    pub gradient: Vec<GradientIntensityReport>,
    pub weights: Vec<WeightStats>,
    pub ranks: Vec<RankStats>,
}

/// Computes every per-layer metric of `net` on the probe batch.
pub fn take_snapshot(
    net: &MlpNetwork,
    probe: &Tensor,
    cfg: &MetricConfig,
    id: usize,
    step: usize,
    task_id: usize,
    network: &str,
) -> Result<MetricSnapshot> {
    let out = net.forward(probe)?;
    let mut dormancy = Vec::with_capacity(net.layers.len());
    let mut gradient = Vec::with_capacity(net.layers.len());
    let mut ranks = Vec::new();
    for (l, act) in out.activations.iter().enumerate() {
        dormancy.push(dormancy_index(l, act, cfg.tau_d)?);
        gradient.push(magi_with_target(net, probe, l, cfg.tau_g, cfg.magi_target)?);
        if cfg.ranks {
            ranks.push(rank_stats(l, act, cfg.rank_delta)?);
        }
    }
    Ok(MetricSnapshot {
        id,
        step,
        task_id,
        network: network.to_string(),
        dormancy,
        gradient,
        weights: weight_stats(net),
        ranks,
    })
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task_id: usize,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episodic_return: Option<f64>,
    /// Ids into [`TrainingTrace::snapshots`].
    pub snapshots: Vec<usize>,
    /// Only filled when explicitly requested; it would otherwise break
    /// byte-for-byte reproducibility of the written artifacts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

/// Overlap of one layer's zero-gradient set between consecutive training
/// steps, accumulated from `from_step` on (see
/// [`crate::train::ZeroGradTracking`]).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepOverlapTally {
    pub layer: usize,
    /// First step whose mask enters a pair.
    pub from_step: usize,
    pub pairs: usize,
    /// Pairs where at least one of the two sets is non-empty.
    pub informative_pairs: usize,
    /// Sum of the coefficients of the informative pairs.
    pub coefficient_sum: f64,
    pub min_coefficient: Option<f64>,
}

impl StepOverlapTally {
    /// Adds the pair (`prev`, `next`). Pairs of two empty sets are counted
    /// but carry no information about persistence.
    pub fn push(&mut self, prev: &[bool], next: &[bool]) {
        self.pairs += 1;
        let o = overlap_masks(next, prev);
        if o.set_a_size + o.set_b_size > 0 {
            self.informative_pairs += 1;
            self.coefficient_sum += o.coefficient;
            self.min_coefficient = Some(self.min_coefficient.map_or(o.coefficient, |m| m.min(o.coefficient)));
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub experiment_id: String,
    pub run: String,
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<MetricSnapshot>,
    /// Set when training stopped early (divergence, non-finite gradients).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halted: Option<String>,
    /// Every-step zero-gradient overlap, when tracking was requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_overlap: Option<StepOverlapTally>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetKind {
    Dormant,
    ZeroGrad,
}

impl TrainingTrace {
    pub fn new(experiment_id: impl Into<String>, run: impl Into<String>) -> Self {
        Self {
            experiment_id: experiment_id.into(),
            run: run.into(),
            ..Self::default()
        }
    }

    /// Appends a snapshot, assigning its id. Returns the id.
    pub fn push_snapshot(&mut self, mut snap: MetricSnapshot) -> usize {
        let id = self.snapshots.len();
        snap.id = id;
        self.snapshots.push(snap);
        id
    }

    /// Appends a record; steps must be strictly increasing and snapshot ids
    /// must exist.
    pub fn push_record(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.step <= last.step {
                return Err(Error::InvalidArgument(format!(
                    "trace steps must increase: {} after {}",
                    rec.step, last.step
                )));
            }
        }
        if let Some(&bad) = rec.snapshots.iter().find(|&&s| s >= self.snapshots.len()) {
            return Err(Error::MissingSnapshots(format!("record references snapshot {bad}")));
        }
        self.records.push(rec);
        Ok(())
    }

    /// Snapshots of one network, in step order.
    pub fn snapshots_of<'a>(&'a self, network: &'a str) -> impl Iterator<Item = &'a MetricSnapshot> + 'a {
        self.snapshots.iter().filter(move |s| s.network == network)
    }

    /// Overlap of a layer's dormant or zero-gradient set between each pair of
    /// consecutive snapshots of `network`.
    pub fn overlap_trace(&self, network: &str, kind: SetKind, layer: usize) -> Result<Vec<OverlapReport>> {
        let masks: Vec<&[bool]> = self
            .snapshots_of(network)
            .map(|s| mask_of(s, kind, layer))
            .collect::<Result<_>>()?;
        if masks.len() < 2 {
            return Err(Error::MissingSnapshots(format!(
                "need two snapshots of {network:?}, have {}",
                masks.len()
            )));
        }
        Ok(masks.windows(2).map(|w| overlap_masks(w[1], w[0])).collect())
    }

    /// Time series of a layer's dormant or zero-gradient fraction.
    pub fn fraction_series(&self, network: &str, kind: SetKind, layer: usize) -> Result<Vec<f64>> {
        self.snapshots_of(network)
            .map(|s| match kind {
                SetKind::Dormant => s
                    .dormancy
                    .get(layer)
                    .map(|r| r.dormant_fraction),
                SetKind::ZeroGrad => s
                    .gradient
                    .get(layer)
                    .map(|r| r.zero_grad_fraction),
            }
            .ok_or_else(|| Error::MissingSnapshots(format!("layer {layer} in snapshot {}", s.id))))
            .collect()
    }

    pub fn final_record(&self) -> Option<&StepRecord> {
        self.records.last()
    }
}

/// Per-iteration overlap of a layer's sets in a single-network trace.
pub fn compute_overlap_trace(trace: &TrainingTrace, kind: SetKind, layer: usize) -> Result<Vec<OverlapReport>> {
    let network = trace
        .snapshots
        .first()
        .map(|s| s.network.clone())
        .ok_or_else(|| Error::MissingSnapshots("trace has no snapshots".into()))?;
    trace.overlap_trace(&network, kind, layer)
}

fn mask_of(s: &MetricSnapshot, kind: SetKind, layer: usize) -> Result<&[bool]> {
    let m = match kind {
        SetKind::Dormant => s.dormancy.get(layer).map(|r| r.dormant_mask.as_slice()),
        SetKind::ZeroGrad => s.gradient.get(layer).map(|r| r.zero_grad_mask.as_slice()),
    };
    m.ok_or_else(|| Error::MissingSnapshots(format!("layer {layer} in snapshot {}", s.id)))
}

#[derive(Serialize)]
struct JsonlLine<'a, T: Serialize> {
    experiment: &'a str,
    run: &'a str,
    network: &'a str,
    step: usize,
    task: usize,
    layer: usize,
    kind: &'static str,
    report: &'a T,
}

impl TrainingTrace {
    /// One JSON object per line: step records first, then every per-layer
    /// report keyed by experiment, run, network, step and layer.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let line = serde_json::json!({
                "experiment": self.experiment_id,
                "run": self.run,
                "kind": "step",
                "record": r,
            });
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        for s in &self.snapshots {
            let base = |layer: usize, kind: &'static str| (layer, kind);
            for r in &s.dormancy {
                push_line(&mut out, self, s, base(r.layer_index, "dormancy"), r)?;
            }
            for r in &s.gradient {
                push_line(&mut out, self, s, base(r.layer_index, "magi"), r)?;
            }
            for r in &s.weights {
                push_line(&mut out, self, s, base(r.layer_index, "weights"), r)?;
            }
            for r in &s.ranks {
                push_line(&mut out, self, s, base(r.layer_index, "rank"), r)?;
            }
        }
        if let Some(t) = &self.step_overlap {
            let line = serde_json::json!({
                "experiment": self.experiment_id,
                "run": self.run,
                "kind": "zero_grad_step_overlap",
                "report": t,
            });
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        if let Some(h) = &self.halted {
            let line = serde_json::json!({
                "experiment": self.experiment_id,
                "run": self.run,
                "kind": "halted",
                "reason": h,
            });
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Flat per-record CSV: losses, then for every network and layer the
    /// dormant fraction, zero-gradient fraction and overlap with the previous
    /// snapshot of the same network.
    pub fn to_summary_csv(&self) -> Result<String> {
        let mut networks: Vec<&str> = Vec::new();
        for s in &self.snapshots {
            if !networks.contains(&s.network.as_str()) {
                networks.push(&s.network);
            }
        }
        let layers_of = |net: &str| {
            self.snapshots_of(net)
                .next()
                .map_or(0, |s| s.dormancy.len())
        };
        let with_return = self.records.iter().any(|r| r.episodic_return.is_some());

        let mut out = String::from("step,task,train_loss,test_loss");
        if with_return {
            out.push_str(",episodic_return");
        }
        for net in &networks {
            for l in 0..layers_of(net) {
                write!(
                    out,
                    ",{net}_l{l}_dormant_fraction,{net}_l{l}_zero_grad_fraction,{net}_l{l}_dormant_overlap,{net}_l{l}_zero_grad_overlap"
                )
                .expect("writing to a String");
            }
        }
        out.push('\n');

        let mut prev: std::collections::HashMap<&str, &MetricSnapshot> = Default::default();
        for r in &self.records {
            write!(out, "{},{},{:?},", r.step, r.task_id, r.train_loss).expect("string write");
            if let Some(t) = r.test_loss {
                write!(out, "{t:?}").expect("string write");
            }
            if with_return {
                out.push(',');
                if let Some(ret) = r.episodic_return {
                    write!(out, "{ret:?}").expect("string write");
                }
            }
            for net in &networks {
                let snap = r
                    .snapshots
                    .iter()
                    .map(|&i| &self.snapshots[i])
                    .find(|s| s.network == *net);
                for l in 0..layers_of(net) {
                    match snap {
                        Some(s) => {
                            let (d, g) = (&s.dormancy[l], &s.gradient[l]);
                            write!(out, ",{:?},{:?}", d.dormant_fraction, g.zero_grad_fraction)
                                .expect("string write");
                            match prev.get(net) {
                                Some(p) => {
                                    let od = overlap_masks(&d.dormant_mask, &p.dormancy[l].dormant_mask);
                                    let og = overlap_masks(&g.zero_grad_mask, &p.gradient[l].zero_grad_mask);
                                    write!(out, ",{:?},{:?}", od.coefficient, og.coefficient)
                                        .expect("string write");
                                }
                                None => out.push_str(",,"),
                            }
                        }
                        None => out.push_str(",,,,"),
                    }
                }
                if let Some(s) = snap {
                    prev.insert(net, s);
                }
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `<stem>.jsonl` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.jsonl")), self.to_jsonl()?)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_summary_csv()?)?;
        Ok(())
    }
}

fn push_line<T: Serialize>(
    out: &mut String,
    trace: &TrainingTrace,
    s: &MetricSnapshot,
    (layer, kind): (usize, &'static str),
    report: &T,
) -> Result<()> {
    let line = JsonlLine {
        experiment: &trace.experiment_id,
        run: &trace.run,
        network: &s.network,
        step: s.step,
        task: s.task_id,
        layer,
        kind,
        report,
    };
    out.push_str(&serde_json::to_string(&line)?);
    out.push('\n');
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap_with_masks(dormant: Vec<bool>, zero: Vec<bool>) -> MetricSnapshot {
        let n = dormant.len();
        MetricSnapshot {
            id: 0,
            step: 0,
            task_id: 0,
            network: "net".into(),
            dormancy: vec![DormancyReport {
                layer_index: 0,
                mean_abs: vec![0.0; n],
                scores: vec![0.0; n],
                dormant_fraction: metrics::fraction(&dormant),
                dormant_mask: dormant,
                batch_size: 1,
                tau_d: 0.0,
                degenerate: false,
            }],
            gradient: vec![GradientIntensityReport {
                layer_index: 0,
                magi: vec![0.0; n],
                zero_grad_fraction: metrics::fraction(&zero),
                zero_grad_mask: zero,
                tau_g: 0.0,
            }],
            weights: vec![],
            ranks: vec![],
        }
    }

    #[test]
    fn overlap_between_consecutive_snapshots() {
        let mut t = TrainingTrace::new("e", "r");
        t.push_snapshot(snap_with_masks(vec![false, true, true, false], vec![false; 4]));
        t.push_snapshot(snap_with_masks(vec![false, false, true, true], vec![false; 4]));
        t.push_snapshot(snap_with_masks(vec![false, false, true, true], vec![false; 4]));
        let o = compute_overlap_trace(&t, SetKind::Dormant, 0).unwrap();
        assert_eq!(o.iter().map(|r| r.coefficient).collect::<Vec<_>>(), vec![0.5, 1.0]);
        let z = compute_overlap_trace(&t, SetKind::ZeroGrad, 0).unwrap();
        assert!(z.iter().all(|r| r.degenerate && r.coefficient == 1.0));
    }

    #[test]
    fn overlap_needs_two_snapshots() {
        let mut t = TrainingTrace::new("e", "r");
        assert!(compute_overlap_trace(&t, SetKind::Dormant, 0).is_err());
        t.push_snapshot(snap_with_masks(vec![true], vec![true]));
        assert!(compute_overlap_trace(&t, SetKind::Dormant, 0).is_err());
        t.push_snapshot(snap_with_masks(vec![true], vec![true]));
        assert!(compute_overlap_trace(&t, SetKind::Dormant, 3).is_err());
    }

    #[test]
    fn records_must_advance_and_reference_snapshots() {
        let mut t = TrainingTrace::new("e", "r");
        let rec = |step, snaps: Vec<usize>| StepRecord {
            step,
            task_id: 0,
            train_loss: 1.0,
            test_loss: None,
            episodic_return: None,
            snapshots: snaps,
            wall_clock_ms: None,
        };
        assert!(t.push_record(rec(0, vec![0])).is_err());
        t.push_snapshot(snap_with_masks(vec![true], vec![true]));
        t.push_record(rec(0, vec![0])).unwrap();
        assert!(t.push_record(rec(0, vec![])).is_err());
        t.push_record(rec(5, vec![])).unwrap();
        let csv = t.to_summary_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("step,task,train_loss,test_loss,net_l0_dormant_fraction"));
        let jsonl = t.to_jsonl().unwrap();
        for line in jsonl.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["experiment"], "e");
        }
    }
}
