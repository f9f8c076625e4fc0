//! Synthetic regression tasks and datasets.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Input width of the 17-feature benchmark target.
pub const BENCHMARK_DIM: usize = 17;

/// Noise-free value of the 17-feature benchmark target plus `noise`.
///
/// ```
/// let y = plasticity::tasks::eval_target(&[0.0; 17], None).unwrap();
/// assert_eq!(y, 2.5);
/// ```
pub fn eval_target(x: &[f64], noise: Option<f64>) -> Result<f64> {
    if x.len() != BENCHMARK_DIM {
        return Err(Error::Shape(format!(
            "benchmark target takes {BENCHMARK_DIM} inputs, got {}",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("benchmark target input".into()));
    }
    let y = 2.5 * x[0] - 1.2 * x[1] * x[1] + 0.8 * x[2].sin() + 1.5 * x[3].cos()
        + 0.7 * x[4] * x[5]
        - 0.3 * x[6].powi(3)
        + (-0.1 * x[7] * x[7]).exp()
        + 1.1 * x[8]
        - 0.5 * x[9] * x[9]
        + 0.9 * x[10].tanh()
        + 0.2 * x[11] * x[11]
        - 0.6 * x[12].abs().sqrt()
        + 0.5 * x[13] * x[14]
        - 0.4 * x[15]
        + 0.3 * x[16];
    Ok(y + noise.unwrap_or(0.0))
}

/// Per-coordinate sampling law for task inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum InputDistribution {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
}

impl Default for InputDistribution {
    fn default() -> Self {
        InputDistribution::Uniform { low: -2.0, high: 2.0 }
    }
}

impl InputDistribution {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            InputDistribution::Uniform { low, high } => rng.random_range(low..high),
            InputDistribution::Normal { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + std * z
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            InputDistribution::Uniform { low, high } if low < high => Ok(()),
            InputDistribution::Normal { std, .. } if std >= 0.0 => Ok(()),
            other => Err(Error::InvalidArgument(format!("bad input distribution {other:?}"))),
        }
    }
}

/// The data-generating function of a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetFunction {
    /// The 17-feature benchmark, see [`eval_target`].
    Benchmark17,
    /// `offset + amplitude * sin(direction · x + phase)`.
    Ridge {
        offset: f64,
        amplitude: f64,
        direction: Vec<f64>,
        phase: f64,
    },
    /// `coefficients · x + intercept`.
    Linear { coefficients: Vec<f64>, intercept: f64 },
}

impl TargetFunction {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            TargetFunction::Benchmark17 => eval_target(x, None),
            TargetFunction::Ridge {
                offset,
                amplitude,
                direction,
                phase,
            } => {
                if x.len() != direction.len() {
                    return Err(Error::Shape(format!(
                        "ridge target takes {} inputs, got {}",
                        direction.len(),
                        x.len()
                    )));
                }
                let t: f64 = x.iter().zip(direction).map(|(a, b)| a * b).sum();
                Ok(offset + amplitude * (t + phase).sin())
            }
            TargetFunction::Linear {
                coefficients,
                intercept,
            } => {
                if x.len() != coefficients.len() {
                    return Err(Error::Shape(format!(
                        "linear target takes {} inputs, got {}",
                        coefficients.len(),
                        x.len()
                    )));
                }
                Ok(intercept + x.iter().zip(coefficients).map(|(a, b)| a * b).sum::<f64>())
            }
        }
    }
}

/// Description of a regression task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTaskSpec {
    pub name: String,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub input_distribution: InputDistribution,
    pub target: TargetFunction,
    pub seed: u64,
}

impl RegressionTaskSpec {
    /// The 17-feature benchmark with `σ = 0.1` noise and `U(-2, 2)` inputs.
    pub fn benchmark() -> Self {
        Self {
            name: "benchmark17".into(),
            input_dim: BENCHMARK_DIM,
            noise_sigma: 0.1,
            input_distribution: InputDistribution::default(),
            target: TargetFunction::Benchmark17,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        if matches!(self.target, TargetFunction::Benchmark17) && self.input_dim != BENCHMARK_DIM {
            return Err(Error::InvalidArgument(format!(
                "benchmark target needs input_dim {BENCHMARK_DIM}"
            )));
        }
        self.input_distribution.validate()
    }

    /// Noise-free target value.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.target.eval(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainKind {
    DormancyInducing,
    Benign,
}

/// Stand-in pretraining tasks.
///
/// The dormancy-inducing task has a large constant offset and samples inputs
/// from a narrow band, so gradient steps on the offset push whole ReLU units
/// below zero for every input at once. The benign task is a low-amplitude
/// smooth ridge over the benchmark input range.
pub fn make_pretrain_task(kind: PretrainKind, seed: u64) -> RegressionTaskSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a5c);
    let scale = 1.0 / (BENCHMARK_DIM as f64).sqrt();
    let direction: Vec<f64> = (0..BENCHMARK_DIM)
        .map(|_| rng.random_range(-1.0..1.0) * scale)
        .collect();
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    match kind {
        PretrainKind::DormancyInducing => RegressionTaskSpec {
            name: "pretrain-dormancy-inducing".into(),
            input_dim: BENCHMARK_DIM,
            noise_sigma: 0.1,
            input_distribution: InputDistribution::Uniform { low: 0.5, high: 1.0 },
            target: TargetFunction::Ridge {
                offset: -10.0,
                amplitude: 0.5,
                direction,
                phase,
            },
            seed,
        },
        PretrainKind::Benign => RegressionTaskSpec {
            name: "pretrain-benign".into(),
            input_dim: BENCHMARK_DIM,
            noise_sigma: 0.1,
            input_distribution: InputDistribution::default(),
            target: TargetFunction::Ridge {
                offset: 0.0,
                amplitude: 0.5,
                direction,
                phase,
            },
            seed,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Probe,
}

/// Samples drawn from a task.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub split: Split,
    pub generator_seed: u64,
    pub spec: RegressionTaskSpec,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows selected by index, keeping the provenance fields.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            targets: self.targets.select_rows(idx),
            split: self.split,
            generator_seed: self.generator_seed,
            spec: self.spec.clone(),
        }
    }
}

/// Draws `n` samples. Inputs come first for each row, then the noise term,
/// from a single ChaCha stream seeded by `seed`.
pub fn generate_dataset(spec: &RegressionTaskSpec, n: usize, seed: u64, split: Split) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one row".into()));
    }
    let d = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let start = xs.len();
        for _ in 0..d {
            xs.push(spec.input_distribution.sample(&mut rng));
        }
        let eps = if spec.noise_sigma > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        ys.push(spec.eval(&xs[start..])? + eps);
    }
    Ok(Dataset {
        inputs: Tensor::matrix(n, d, xs)?,
        targets: Tensor::matrix(n, 1, ys)?,
        split,
        generator_seed: seed,
        spec: spec.clone(),
    })
}

/// Ordered task sequence with per-task step budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub tasks: Vec<ScheduledTask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduledTask {
    pub spec: RegressionTaskSpec,
    pub steps: usize,
}

impl TaskSchedule {
    pub fn new(tasks: Vec<ScheduledTask>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one task".into()));
        }
        if let Some(t) = tasks.iter().find(|t| t.steps == 0) {
            return Err(Error::InvalidArgument(format!(
                "task {} has an empty budget",
                t.spec.name
            )));
        }
        Ok(Self { tasks })
    }

    /// Global step indices at which each task after the first begins.
    pub fn switch_boundaries(&self) -> Vec<usize> {
        self.tasks
            .iter()
            .scan(0, |acc, t| {
                *acc += t.steps;
                Some(*acc)
            })
            .take(self.tasks.len() - 1)
            .collect()
    }

    pub fn total_steps(&self) -> usize {
        self.tasks.iter().map(|t| t.steps).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    rows: usize,
    generator_seed: u64,
    split: Split,
    spec: RegressionTaskSpec,
}

/// Sidecar manifest path for a dataset CSV.
pub fn manifest_path(csv_path: &Path) -> PathBuf {
    let mut p = csv_path.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

impl Dataset {
    /// CSV with columns `X0..X{d-1},y`. Floats use shortest round-trip
    /// formatting.
    pub fn to_csv_string(&self) -> String {
        let d = self.inputs.cols();
        let mut out = String::new();
        let header: Vec<String> = (0..d).map(|j| format!("X{j}")).chain(["y".into()]).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for k in 0..self.len() {
            for v in self.inputs.row(k) {
                out.push_str(&format!("{v:?},"));
            }
            out.push_str(&format!("{:?}\n", self.targets.data()[k]));
        }
        out
    }

    /// Writes the CSV and its manifest.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string())?;
        let manifest = DatasetManifest {
            format_version: 1,
            rows: self.len(),
            generator_seed: self.generator_seed,
            split: self.split,
            spec: self.spec.clone(),
        };
        std::fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(manifest_path(path))?)?;
        let mut reader = csv::Reader::from_path(path)?;
        let d = manifest.spec.input_dim;
        let headers = reader.headers()?.clone();
        if headers.len() != d + 1 || headers.get(d) != Some("y") {
            return Err(Error::Format(format!("unexpected CSV header {headers:?}")));
        }
        let mut xs = Vec::with_capacity(manifest.rows * d);
        let mut ys = Vec::with_capacity(manifest.rows);
        for rec in reader.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad number {s:?}: {e}")))
            };
            for j in 0..d {
                xs.push(parse(&rec[j])?);
            }
            ys.push(parse(&rec[d])?);
        }
        if ys.len() != manifest.rows {
            return Err(Error::Format(format!(
                "manifest promises {} rows, CSV has {}",
                manifest.rows,
                ys.len()
            )));
        }
        Ok(Dataset {
            inputs: Tensor::matrix(ys.len(), d, xs)?,
            targets: Tensor::matrix(ys.len(), 1, ys)?,
            split: manifest.split,
            generator_seed: manifest.generator_seed,
            spec: manifest.spec,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(j: usize, v: f64) -> [f64; 17] {
        let mut x = [0.0; 17];
        x[j] = v;
        x
    }

    #[test]
    fn zero_and_first_axis() {
        assert_eq!(eval_target(&[0.0; 17], None).unwrap(), 2.5);
        assert_eq!(eval_target(&unit(0, 1.0), None).unwrap(), 5.0);
        assert_eq!(eval_target(&[0.0; 17], Some(0.25)).unwrap(), 2.75);
    }

    #[test]
    fn sqrt_abs_term() {
        let y = eval_target(&unit(12, 4.0), None).unwrap();
        assert!((y - 1.3).abs() < 1e-15);
        let y = eval_target(&unit(12, -4.0), None).unwrap();
        assert!((y - 1.3).abs() < 1e-15);
    }

    #[test]
    fn wrong_dimension() {
        assert!(eval_target(&[0.0; 16], None).is_err());
        assert!(eval_target(&unit(3, f64::NAN), None).is_err());
    }

    #[test]
    fn zero_noise_reproduces_target() {
        let mut spec = RegressionTaskSpec::benchmark();
        spec.noise_sigma = 0.0;
        let ds = generate_dataset(&spec, 50, 3, Split::Train).unwrap();
        for k in 0..ds.len() {
            assert_eq!(ds.targets.data()[k], eval_target(ds.inputs.row(k), None).unwrap());
        }
    }

    #[test]
    fn generation_is_seeded() {
        let spec = RegressionTaskSpec::benchmark();
        let a = generate_dataset(&spec, 1000, 7, Split::Train).unwrap();
        let b = generate_dataset(&spec, 1000, 7, Split::Train).unwrap();
        let c = generate_dataset(&spec, 1000, 8, Split::Test).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        assert_eq!(c.len(), 1000);
        assert_ne!(a.inputs, c.inputs);
        assert!(a.inputs.data().iter().all(|&v| (-2.0..2.0).contains(&v)));
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = RegressionTaskSpec::benchmark();
        spec.noise_sigma = -1.0;
        assert!(generate_dataset(&spec, 1, 0, Split::Train).is_err());
        let spec = RegressionTaskSpec::benchmark();
        assert!(generate_dataset(&spec, 0, 0, Split::Train).is_err());
    }

    #[test]
    fn pretrain_tasks_are_deterministic() {
        assert_eq!(
            make_pretrain_task(PretrainKind::DormancyInducing, 4),
            make_pretrain_task(PretrainKind::DormancyInducing, 4)
        );
        assert_ne!(
            make_pretrain_task(PretrainKind::Benign, 4),
            make_pretrain_task(PretrainKind::Benign, 5)
        );
    }

    #[test]
    fn schedule_boundaries() {
        let t = |steps| ScheduledTask {
            spec: RegressionTaskSpec::benchmark(),
            steps,
        };
        let s = TaskSchedule::new(vec![t(100), t(50), t(25)]).unwrap();
        assert_eq!(s.switch_boundaries(), vec![100, 150]);
        assert_eq!(s.total_steps(), 175);
        assert!(TaskSchedule::new(vec![]).is_err());
        assert!(TaskSchedule::new(vec![t(0)]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let ds = generate_dataset(&RegressionTaskSpec::benchmark(), 20, 1, Split::Test).unwrap();
        ds.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path).unwrap();
        assert_eq!(ds, back);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("X0,X1,X2,"));
        assert!(text.lines().next().unwrap().ends_with("X16,y"));
    }
}
