//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage, 2 validation or input error, 3
//! numerical failure, 4 verification failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::info;
use unisoma_core::train::Task;

use crate::commands::{self, Evaluator};
use crate::config::{generate_config, parse_value, train_config};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::report::{ensure_dir, write_json};
use crate::suites::{all_pass, gradcheck_suite, verify_suite, CheckOutcome};

pub const DATA_ENV: &str = "UNISOMA_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "unisoma", version, about = "Multi-solid deformation surrogate: data, training and checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a scenario config.
    Generate(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a baseline on a dataset split.
    Eval(EvalArgs),
    /// Roll a checkpoint out along one trajectory.
    Rollout(RolloutArgs),
    /// Run the gradient-check suite.
    Gradcheck(SuiteArgs),
    /// Run the slice-identity and invariance suite.
    Verify(SuiteArgs),
    /// Train and evaluate once per neighbor count.
    AblateK(AblateArgs),
}

/// `key=value` override; the key mirrors a config file key.
fn parse_set(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// TOML file with `samples`, `splits`, `seed` and a `[scenario]` table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long, env = DATA_ENV)]
    pub out: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scenario kind: bilateral_press or cavity_grip.
    #[arg(long)]
    pub kind: Option<String>,
    /// Load steps per trajectory.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Any other config key, e.g. `--set scenario.travel=[0.1,0.2]`.
    #[arg(long = "set", value_parser = parse_set)]
    pub set: Vec<(String, String)>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// TOML training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// longtime or autoregressive.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub slices: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// points_over_edges or k_value.
    #[arg(long)]
    pub gamma_mode: Option<String>,
    /// absolute or displacement.
    #[arg(long)]
    pub target_space: Option<String>,
    /// Any other config key, e.g. `--set model.allocation_softmax=true`.
    #[arg(long = "set", value_parser = parse_set)]
    pub set: Vec<(String, String)>,
}

impl ModelFlags {
    fn overrides(&self) -> Vec<(String, toml::Value)> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), parse_value(&v)));
            }
        };
        let quoted = |s: &Option<String>| s.as_ref().map(|s| format!("\"{s}\""));
        put("task", quoted(&self.task));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| format!("{v:e}")));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("noise_std", self.noise_std.map(|v| format!("{v:e}")));
        put("seed", self.seed.map(|v| v.to_string()));
        put("model.channels", self.channels.map(|v| v.to_string()));
        put("model.slices", self.slices.map(|v| v.to_string()));
        put("model.layers", self.layers.map(|v| v.to_string()));
        put("model.k", self.k.map(|v| v.to_string()));
        put("model.heads", self.heads.map(|v| v.to_string()));
        put("model.gamma_mode", quoted(&self.gamma_mode));
        put("target_space", quoted(&self.target_space));
        out.extend(self.set.iter().map(|(k, v)| (k.clone(), parse_value(v))));
        out
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    /// Output directory for checkpoint, history and summary.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: ModelFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate a reference predictor instead: freeze or ground_truth.
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// longtime or autoregressive; defaults to the dataset scenario's task.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sample id from the dataset manifest.
    #[arg(long)]
    pub sample: u64,
    /// Steps to roll out; defaults to the whole trajectory.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random cases per identity check.
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    /// Also write the outcomes as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated neighbor counts.
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 4, 5])]
    pub ks: Vec<usize>,
    #[command(flatten)]
    pub flags: ModelFlags,
}

fn parse_task(s: &str) -> Result<Task> {
    match s {
        "longtime" | "long_time" => Ok(Task::LongTime),
        "autoregressive" => Ok(Task::Autoregressive),
        _ => Err(Error::Config(format!("key `task`: unknown task `{s}`"))),
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))
}

fn print_outcomes(outcomes: &[CheckOutcome]) {
    for o in outcomes {
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("{status}  {:<40} cases={:<6} max_err={:.3e} tol={:.0e} {}", o.name, o.cases, o.max_err, o.tol, o.detail);
    }
}

fn run_suite(outcomes: Vec<CheckOutcome>, report: Option<&PathBuf>) -> Result<()> {
    print_outcomes(&outcomes);
    if let Some(path) = report {
        write_json(path, &outcomes)?;
    }
    if all_pass(&outcomes) {
        Ok(())
    } else {
        let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.name.as_str()).collect();
        Err(Error::Verification(failed.join(", ")))
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let mut overrides: Vec<(String, toml::Value)> = Vec::new();
            if let Some(k) = &a.kind {
                overrides.push(("scenario.kind".into(), toml::Value::String(k.clone())));
            }
            if let Some(v) = a.samples {
                overrides.push(("samples".into(), toml::Value::Integer(v as i64)));
            }
            if let Some(v) = a.seed {
                overrides.push(("seed".into(), toml::Value::Integer(v as i64)));
            }
            if let Some(v) = a.steps {
                overrides.push(("scenario.steps".into(), toml::Value::Integer(v as i64)));
            }
            overrides.extend(a.set.iter().map(|(k, v)| (k.clone(), parse_value(v))));
            let cfg = generate_config(a.config.as_deref(), &overrides)?;
            let m = commands::generate(&cfg, &a.out, a.jobs)?;
            println!("{} samples in {} ({} seeds skipped)", m.samples.len(), a.out.display(), m.skipped.len());
        }
        Command::Train(a) => {
            let cfg = train_config(a.flags.config.as_deref(), &a.flags.overrides())?;
            let ds = Dataset::open(&a.data)?;
            let outcome = commands::train_on(&cfg, &ds, &a.out)?;
            println!("best epoch {} of {}; outputs in {}", outcome.best_epoch, outcome.history.len(), a.out.display());
        }
        Command::Eval(a) => {
            let ds = Dataset::open(&a.data)?;
            let evaluator = match (&a.checkpoint, a.baseline.as_deref()) {
                (Some(p), _) => commands::load_checkpoint(p)?,
                (None, Some("freeze")) => Evaluator::Freeze,
                (None, Some("ground_truth")) => Evaluator::GroundTruth,
                (None, other) => return Err(Error::Config(format!("unknown baseline {other:?}, expected freeze or ground_truth"))),
            };
            let task = match &a.task {
                Some(t) => parse_task(t)?,
                None => commands::default_task(ds.manifest.scenario.kind),
            };
            let report = pool(a.jobs)?.install(|| commands::evaluate(&evaluator, &ds, &a.split, task))?;
            commands::write_eval(&report, &a.out)?;
            for r in &report.rows {
                let rel = r.relative_l2.map_or("n/a".to_string(), |v| format!("{v:.6}"));
                println!("{:<12} {:<10} relative_l2={rel} rmse={:.6}", r.solid, r.quantity, r.rmse);
            }
            if let Some(v) = report.rmse_all {
                println!("rmse_all={v:.6}");
            }
        }
        Command::Rollout(a) => {
            let ds = Dataset::open(&a.data)?;
            let evaluator = commands::load_checkpoint(&a.checkpoint)?;
            let m = commands::rollout_sample(&evaluator, &ds, a.sample, a.steps, &a.out)?;
            println!("rmse_all={:.6} over {} steps", m.rmse_all, m.per_step_rmse.len());
        }
        Command::Gradcheck(a) => run_suite(gradcheck_suite(a.seed), a.report.as_ref())?,
        Command::Verify(a) => run_suite(verify_suite(a.seed, a.cases), a.report.as_ref())?,
        Command::AblateK(a) => {
            let cfg = train_config(a.flags.config.as_deref(), &a.flags.overrides())?;
            let ds = Dataset::open(&a.data)?;
            ensure_dir(&a.out)?;
            let rows = commands::ablate_k(&cfg, &ds, &a.ks, &a.out)?;
            println!("k,best_val_loss,test_geometry_relative_l2,test_rmse_all");
            for r in rows {
                let show = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
                println!("{},{},{},{}", r.k, show(r.best_val_loss), show(r.test_geometry_relative_l2), show(r.test_rmse_all));
            }
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name), runs it and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => {
            info!("done");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
