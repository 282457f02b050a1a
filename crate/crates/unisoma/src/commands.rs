//! What each subcommand does, minus argument parsing.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use unisoma_core::metrics::{rmse_all, MetricRow, TrajectoryMetrics};
use unisoma_core::scene::SceneSample;
use unisoma_core::train::{
    evaluate_longtime, rollout, summarize_rollouts, train, Freeze, GroundTruth, Predictor, Task, TrainConfig, TrainData, TrainError,
    TrainOutcome,
};
use unisoma_core::worlds::ScenarioKind;
use unisoma_core::{model::Unisoma, Tensor};

use crate::checkpoint;
use crate::config::GenerateConfig;
use crate::dataset::{generate_dataset, Dataset, Manifest};
use crate::error::{Error, Result};
use crate::report::{ensure_dir, write_csv, write_json};
use crate::scene_io::save_trajectory;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";

pub fn generate(cfg: &GenerateConfig, out: &Path, jobs: usize) -> Result<Manifest> {
    generate_dataset(&cfg.scenario, cfg.samples, cfg.splits, cfg.seed, out, jobs)
}

/// Something that predicts: a trained model or a reference baseline.
pub enum Evaluator {
    Model(Box<Unisoma>),
    Freeze,
    GroundTruth,
}

impl Evaluator {
    pub fn name(&self) -> &'static str {
        match self {
            Evaluator::Model(_) => "model",
            Evaluator::Freeze => "freeze",
            Evaluator::GroundTruth => "ground_truth",
        }
    }
}

impl Predictor for Evaluator {
    fn predict(&self, sample: &SceneSample) -> unisoma_core::Result<Vec<Tensor>> {
        match self {
            Evaluator::Model(m) => m.predict(sample),
            Evaluator::Freeze => Freeze.predict(sample),
            Evaluator::GroundTruth => GroundTruth.predict(sample),
        }
    }
}

/// Predictions computed ahead of time, looked up by sample and step.
struct Cached(BTreeMap<(u64, usize), Vec<Tensor>>);

impl Predictor for Cached {
    fn predict(&self, sample: &SceneSample) -> unisoma_core::Result<Vec<Tensor>> {
        self.0
            .get(&(sample.sample_id, sample.step_index))
            .cloned()
            .ok_or_else(|| unisoma_core::Error::Config(format!("no prediction for sample {}", sample.sample_id)))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub task: Task,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub final_train_loss: f64,
    pub parameters: usize,
    pub config: TrainConfig,
}

/// Trains on the dataset's train split, selecting on its val split, and
/// writes checkpoint, history and summary into `out`.
pub fn train_on(cfg: &TrainConfig, ds: &Dataset, out: &Path) -> Result<TrainOutcome> {
    ensure_dir(out)?;
    let started = Instant::now();
    let result = match cfg.task {
        Task::LongTime => {
            let (tr, va) = (ds.longtime("train")?, ds.longtime("val")?);
            train(TrainData::LongTime(&tr), TrainData::LongTime(&va), cfg)
        }
        Task::Autoregressive => {
            let (tr, va) = (ds.trajectories("train")?, ds.trajectories("val")?);
            train(TrainData::Autoregressive(&tr), TrainData::Autoregressive(&va), cfg)
        }
    };
    match result {
        Ok(outcome) => {
            checkpoint::save(&outcome.best, &out.join(CHECKPOINT_FILE))?;
            write_csv(&out.join(HISTORY_FILE), &outcome.history)?;
            let best = &outcome.history[outcome.best_epoch - 1];
            write_json(
                &out.join(SUMMARY_FILE),
                &TrainSummary {
                    task: cfg.task,
                    epochs: outcome.history.len(),
                    best_epoch: outcome.best_epoch,
                    best_val_loss: best.val_loss,
                    final_train_loss: outcome.history.last().map_or(f64::NAN, |h| h.train_loss),
                    parameters: outcome.best.params.num_scalars(),
                    config: cfg.clone(),
                },
            )?;
            info!(
                "trained {} epochs in {:.1}s, best epoch {}",
                outcome.history.len(),
                started.elapsed().as_secs_f64(),
                outcome.best_epoch
            );
            Ok(outcome)
        }
        Err(TrainError::Diverged { epoch, last_good, history }) => {
            let path = out.join("last_good.ckpt");
            checkpoint::save(&last_good, &path)?;
            write_csv(&out.join(HISTORY_FILE), &history)?;
            warn!("loss diverged at epoch {epoch}; last good parameters saved to {}", path.display());
            Err(Error::Diverged { epoch })
        }
        Err(TrainError::Model(e)) => Err(e.into()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub predictor: String,
    pub task: Task,
    pub split: String,
    pub samples: usize,
    pub rows: Vec<MetricRow>,
    /// Autoregressive only: mean geometry RMSE over all steps and rollouts.
    pub rmse_all: Option<f64>,
    pub trajectories: Vec<TrajectoryMetrics>,
}

impl EvalReport {
    /// Mean geometry relative L2 over deformable solids.
    pub fn geometry_relative_l2(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.quantity == unisoma_core::scene::GEOMETRY)
            .filter_map(|r| r.relative_l2)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Per-solid, per-quantity metrics on `split`. Samples are evaluated in
/// parallel; results do not depend on the worker count.
pub fn evaluate(evaluator: &Evaluator, ds: &Dataset, split: &str, task: Task) -> Result<EvalReport> {
    let started = Instant::now();
    let report = match task {
        Task::LongTime => {
            let samples = ds.longtime(split)?;
            let preds = samples
                .par_iter()
                .map(|s| Ok(((s.sample_id, s.step_index), evaluator.predict(s)?)))
                .collect::<unisoma_core::Result<BTreeMap<_, _>>>()?;
            EvalReport {
                predictor: evaluator.name().into(),
                task,
                split: split.into(),
                samples: samples.len(),
                rows: evaluate_longtime(&Cached(preds), &samples)?,
                rmse_all: None,
                trajectories: Vec::new(),
            }
        }
        Task::Autoregressive => {
            let trajs = ds.trajectories(split)?;
            if trajs.is_empty() {
                return Err(Error::Config(format!("split `{split}` is empty")));
            }
            let metrics = trajs
                .par_iter()
                .map(|t| Ok(rollout(evaluator, t, t.len())?.metrics))
                .collect::<unisoma_core::Result<Vec<_>>>()?;
            EvalReport {
                predictor: evaluator.name().into(),
                task,
                split: split.into(),
                samples: trajs.len(),
                rows: summarize_rollouts(&metrics),
                rmse_all: Some(rmse_all(&metrics)),
                trajectories: metrics,
            }
        }
    };
    info!("evaluated {} samples in {:.2}s", report.samples, started.elapsed().as_secs_f64());
    Ok(report)
}

pub fn write_eval(report: &EvalReport, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    write_csv(&out.join(METRICS_CSV), &report.rows)?;
    write_json(&out.join(METRICS_JSON), report)
}

#[derive(Clone, Debug, Serialize)]
struct StepRow {
    step: usize,
    rmse: f64,
}

/// Rolls out trajectory `id` for `steps` steps and writes the predicted
/// trajectory plus its metrics into `out`.
pub fn rollout_sample(evaluator: &Evaluator, ds: &Dataset, id: u64, steps: Option<usize>, out: &Path) -> Result<TrajectoryMetrics> {
    ensure_dir(out)?;
    let traj = ds.trajectory(id)?;
    let steps = steps.unwrap_or(traj.len());
    let r = rollout(evaluator, &traj, steps)?;
    let mut frames = Vec::with_capacity(steps);
    let mut inputs: Option<Vec<Tensor>> = None;
    for (truth, preds) in traj.iter().zip(&r.predictions) {
        let mut f = truth.clone();
        f.certificate = None;
        if let Some(g) = &inputs {
            for (obj, x) in f.deformables.iter_mut().zip(g) {
                obj.points = x.clone();
            }
        }
        for (t, p) in f.targets.iter_mut().zip(preds) {
            t.values = p.clone();
        }
        inputs = Some(preds.iter().map(|p| p.narrow(1, 0, 3)).collect::<unisoma_core::Result<_>>()?);
        frames.push(f);
    }
    save_trajectory(&frames, &out.join(format!("rollout_{id:05}.json")))?;
    let rows: Vec<StepRow> = r.metrics.per_step_rmse.iter().enumerate().map(|(step, &rmse)| StepRow { step, rmse }).collect();
    write_csv(&out.join(format!("rollout_{id:05}_steps.csv")), &rows)?;
    write_json(&out.join(format!("rollout_{id:05}_metrics.json")), &r.metrics)?;
    Ok(r.metrics)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub k: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub test_geometry_relative_l2: Option<f64>,
    pub test_rmse_all: Option<f64>,
}

/// Trains and evaluates once per neighbor count in `ks`.
pub fn ablate_k(cfg: &TrainConfig, ds: &Dataset, ks: &[usize], out: &Path) -> Result<Vec<AblationRow>> {
    if ks.is_empty() {
        return Err(Error::Config("key `ks`: need at least one neighbor count".into()));
    }
    ensure_dir(out)?;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut c = cfg.clone();
        c.model.k = k;
        let dir = out.join(format!("k{k}"));
        let outcome = train_on(&c, ds, &dir)?;
        let report = evaluate(&Evaluator::Model(Box::new(outcome.best)), ds, "test", c.task)?;
        write_eval(&report, &dir)?;
        rows.push(AblationRow {
            k,
            best_epoch: outcome.best_epoch,
            best_val_loss: outcome.history[outcome.best_epoch - 1].val_loss,
            test_geometry_relative_l2: report.geometry_relative_l2(),
            test_rmse_all: report.rmse_all,
        });
        info!("k = {k} done");
    }
    write_csv(&out.join("ablate_k.csv"), &rows)?;
    Ok(rows)
}

/// The task a scenario's data is normally used for.
pub fn default_task(kind: ScenarioKind) -> Task {
    match kind {
        ScenarioKind::BilateralPress => Task::LongTime,
        ScenarioKind::CavityGrip => Task::Autoregressive,
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Evaluator> {
    Ok(Evaluator::Model(Box::new(checkpoint::load(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use unisoma_core::worlds::ScenarioConfig;

    fn tiny_dataset(dir: &Path) -> Dataset {
        let cfg = GenerateConfig {
            samples: 4,
            splits: [0.5, 0.25, 0.25],
            seed: 2,
            scenario: ScenarioConfig {
                steps: 3,
                ..ScenarioConfig::cavity_grip()
            },
        };
        generate(&cfg, dir, 2).unwrap();
        Dataset::open(dir).unwrap()
    }

    #[test]
    fn baselines_on_both_tasks() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let gt = evaluate(&Evaluator::GroundTruth, &ds, "test", Task::Autoregressive).unwrap();
        assert_eq!(gt.rmse_all, Some(0.0));
        assert_eq!(gt.rows.len(), 2);
        let fr = evaluate(&Evaluator::Freeze, &ds, "test", Task::LongTime).unwrap();
        assert!(fr.geometry_relative_l2().unwrap() > 0.0);
    }

    #[test]
    fn train_writes_artifacts_and_rollout_reads_them() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("data"));
        let cfg = TrainConfig {
            task: Task::Autoregressive,
            epochs: 2,
            batch_size: 0,
            model: unisoma_core::model::ModelConfig {
                channels: 8,
                slices: 4,
                layers: 1,
                ..Default::default()
            },
            ..TrainConfig::default()
        };
        let run = dir.path().join("run");
        let outcome = train_on(&cfg, &ds, &run).unwrap();
        assert_eq!(outcome.history.len(), 2);
        let ev = load_checkpoint(&run.join(CHECKPOINT_FILE)).unwrap();
        let m = rollout_sample(&ev, &ds, 3, Some(2), &run).unwrap();
        assert_eq!(m.per_step_rmse.len(), 2);
        let frames = crate::scene_io::load_trajectory(&run.join("rollout_00003.json")).unwrap();
        assert_eq!(frames.len(), 2);
    }
}
