//! `plasticity` command-line interface.
//!
//! Exit codes: 0 on success, 1 on usage or validation failure (bad flags,
//! invalid configs, failed check suites, failed criteria under `--strict`),
//! 2 on runtime errors (I/O, numerical failures).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use plasticity::harness::{
    run_equivalence_suite, run_experiment, run_gradient_check_suite, write_outputs, ExperimentConfig,
    ExperimentKind, ExperimentReport, GradientSuiteConfig,
};
use plasticity::optim::OptimizerConfig;
use plasticity::ppo::ppo_train;
use plasticity::tasks::{generate_dataset, make_pretrain_task, PretrainKind, RegressionTaskSpec, Split};
use plasticity::trace::{MetricConfig, TrainingTrace};
use plasticity::train::{train_supervised, TrainOptions};
use plasticity::{init_network, Activation, Error};

#[derive(Parser)]
#[command(name = "plasticity", version, about = "Plasticity-loss instrumentation and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Benchmark,
    DormancyInducing,
    Benign,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    Probe,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a regression dataset as CSV (plus a JSON manifest next to it).
    GenData {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "benchmark")]
        task: TaskArg,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Output CSV path; the CSV is printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an MLP on a regression task and write its trace and checkpoint.
    Train {
        #[arg(long, value_enum, default_value = "benchmark")]
        task: TaskArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, value_enum, default_value = "sgd")]
        optimizer: OptimizerArg,
        /// Minibatch size; full batch when omitted.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Hidden widths, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "64,64")]
        hidden: Vec<usize>,
        #[arg(long, value_enum, default_value = "relu")]
        activation: ActivationArg,
        #[arg(long, default_value_t = 1000)]
        train_samples: usize,
        #[arg(long, default_value_t = 1000)]
        test_samples: usize,
        #[arg(long, default_value_t = 50)]
        cadence: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train PPO on the point-mass environment and write the trace.
    Ppo {
        /// Experiment config whose `ppo_dormancy` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the environment-step budget.
        #[arg(long)]
        total_steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment and write its run directory.
    Experiment {
        /// task-switch | ppo-dormancy | perturbation | equivalence-suite
        /// (gradient-free is reserved and rejected)
        #[arg(value_parser = parse_kind)]
        kind: ExperimentKind,
        /// TOML experiment config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replace the config's seed list (repeatable).
        #[arg(long)]
        seed: Vec<u64>,
        /// Run directory; defaults to the config's `output_dir`, then `runs/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the effective config and exit without running.
        #[arg(long)]
        dump_config: bool,
        /// Exit with status 1 when any criterion fails.
        #[arg(long)]
        strict: bool,
    },
    /// Print the summary of a finished run (a run directory or report.json).
    Report { path: PathBuf },
    /// Run the equivalence and gradient-check suites.
    Check {
        /// Experiment config whose `equivalence` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the suite reports into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> Result<ExperimentKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Validation-class errors exit with 1, everything else with 2.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Format(_) | Error::Shape(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn task_spec(task: TaskArg, seed: u64) -> RegressionTaskSpec {
    match task {
        TaskArg::Benchmark => RegressionTaskSpec::benchmark(),
        TaskArg::DormancyInducing => make_pretrain_task(PretrainKind::DormancyInducing, seed),
        TaskArg::Benign => make_pretrain_task(PretrainKind::Benign, seed),
    }
}

fn load_config(path: Option<&Path>, kind: ExperimentKind) -> Result<ExperimentConfig, Error> {
    match path {
        None => Ok(ExperimentConfig::new(kind)),
        Some(p) => {
            let cfg = ExperimentConfig::load(p)?;
            if cfg.kind != kind {
                return Err(Error::InvalidArgument(format!(
                    "config {} is for experiment kind {:?}, not {:?}",
                    p.display(),
                    cfg.kind.name(),
                    kind.name()
                )));
            }
            Ok(cfg)
        }
    }
}

fn run(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::GenData { n, seed, task, split, out } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
                SplitArg::Probe => Split::Probe,
            };
            let ds = generate_dataset(&task_spec(task, seed), n, seed, split)?;
            match out {
                Some(path) => {
                    ds.write_csv(&path)?;
                    eprintln!("wrote {} rows to {}", ds.len(), path.display());
                }
                None => print!("{}", ds.to_csv_string()),
            }
            Ok(0)
        }
        Command::Train {
            task,
            seed,
            epochs,
            lr,
            optimizer,
            batch_size,
            hidden,
            activation,
            train_samples,
            test_samples,
            cadence,
            out,
        } => {
            let spec = task_spec(task, seed);
            let train = generate_dataset(&spec, train_samples, seed.wrapping_mul(2).wrapping_add(1), Split::Train)?;
            let test = generate_dataset(&spec, test_samples, seed.wrapping_mul(2).wrapping_add(2), Split::Test)?;
            let metrics = MetricConfig {
                cadence,
                ..MetricConfig::default()
            };
            let probe = generate_dataset(&spec, metrics.probe_size, seed.wrapping_add(0x5eed), Split::Probe)?;
            let mut widths = vec![spec.input_dim];
            widths.extend(&hidden);
            widths.push(1);
            let act = match activation {
                ActivationArg::Relu => Activation::Relu,
                ActivationArg::Tanh => Activation::Tanh,
            };
            let mut net = init_network(&widths, act, seed)?;
            let opt = match optimizer {
                OptimizerArg::Sgd => OptimizerConfig::sgd(lr),
                OptimizerArg::Adam => OptimizerConfig::adam(lr),
            };
            let mut opts = TrainOptions::full_batch(epochs);
            opts.batch_size = batch_size;
            opts.shuffle_seed = seed;
            opts.metrics = metrics;
            let mut trace = TrainingTrace::new("train", format!("seed-{seed}"));
            train_supervised(&mut net, &train, Some(&test), &opt, &opts, &probe.inputs, &mut trace)?;
            trace.write(&out, "trace")?;
            net.save(out.join("checkpoint.json"))?;
            if let Some(r) = trace.final_record() {
                println!(
                    "final train loss {:.6}, test loss {}",
                    r.train_loss,
                    r.test_loss.map_or_else(|| "n/a".into(), |v| format!("{v:.6}"))
                );
            }
            if let Some(reason) = &trace.halted {
                println!("training halted: {reason}");
            }
            Ok(0)
        }
        Command::Ppo {
            config,
            seed,
            total_steps,
            out,
        } => {
            let cfg = load_config(config.as_deref(), ExperimentKind::PpoDormancy)?;
            let mut ppo = cfg.ppo_dormancy.ppo.clone();
            if let Some(t) = total_steps {
                ppo.total_steps = t;
            }
            let run = ppo_train(&ppo, seed, &cfg.metrics)?;
            run.trace.write(&out, "trace")?;
            let returns: Vec<f64> = run.trace.records.iter().filter_map(|r| r.episodic_return).collect();
            println!(
                "{} iterations; first return {}, last return {}",
                run.trace.records.len(),
                returns.first().map_or_else(|| "n/a".into(), |v| format!("{v:.3}")),
                returns.last().map_or_else(|| "n/a".into(), |v| format!("{v:.3}"))
            );
            Ok(0)
        }
        Command::Experiment {
            kind,
            config,
            seed,
            out,
            dump_config,
            strict,
        } => {
            let mut cfg = load_config(config.as_deref(), kind)?;
            if !seed.is_empty() {
                cfg.seeds = seed;
            }
            if let Some(o) = &out {
                cfg.output_dir = Some(o.display().to_string());
            }
            cfg.validate()?;
            if dump_config {
                print!("{}", cfg.to_toml()?);
                return Ok(0);
            }
            let dir = out
                .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
                .unwrap_or_else(|| Path::new("runs").join(&cfg.name));
            let output = run_experiment(&cfg)?;
            write_outputs(&dir, &cfg, &output)?;
            print!("{}", output.report.to_text());
            println!("run directory: {}", dir.display());
            Ok(if strict && !output.report.all_passed() { 1 } else { 0 })
        }
        Command::Report { path } => {
            let file = if path.is_dir() { path.join("report.json") } else { path };
            let report: ExperimentReport = serde_json::from_str(&std::fs::read_to_string(&file)?)
                .map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
            print!("{}", report.to_text());
            Ok(0)
        }
        Command::Check { config, seed, out } => {
            let mut cfg = load_config(config.as_deref(), ExperimentKind::EquivalenceSuite)?;
            let mut grad = GradientSuiteConfig::default();
            if let Some(s) = seed {
                cfg.seeds = vec![s];
                grad.seed = s;
            }
            let g = run_gradient_check_suite(&grad)?;
            println!(
                "gradient check: {} tanh nets max rel error {:.3e} (tol {:.0e}); {} ReLU nets max rel error {:.3e} (tol {:.0e}): {}",
                g.smooth_nets,
                g.max_smooth_error,
                grad.smooth_tolerance,
                g.relu_nets,
                g.max_relu_error,
                grad.relu_tolerance,
                if g.passed { "PASS" } else { "FAIL" }
            );
            let eq = run_equivalence_suite(&cfg)?;
            print!("{}", eq.report.to_text());
            if let Some(dir) = out {
                write_outputs(&dir, &cfg, &eq)?;
                std::fs::write(dir.join("gradient_check.json"), serde_json::to_string_pretty(&g)? + "\n")?;
            }
            Ok(if g.passed && eq.report.all_passed() { 0 } else { 1 })
        }
    }
}
