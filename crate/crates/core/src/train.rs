//! Training loops for the two tasks, rollout and evaluation.
//!
//! - Long-time: one step from the initial state to the final state; loss is
//!   the sum over deformable solids and target quantities of the relative L2
//!   error, in normalized units.
//! - Autoregressive: one-step prediction with Gaussian noise on the input
//!   geometry; loss is the per-solid MSE summed over deformable solids.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mean, relative_l2, rmse, MetricRow, TrajectoryMetrics};
use crate::model::{to_learned_space, ModelConfig, SceneSchema, TargetSpace, Unisoma};
use crate::optim::Adam;
use crate::params::ModelParams;
use crate::rng::{stream, Rng, Stream};
use crate::scene::{NormStats, SceneSample, GEOMETRY};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[serde(alias = "longtime")]
    LongTime,
    Autoregressive,
}

/// Input-noise standard deviation used for autoregressive training.
pub const DEFAULT_NOISE_STD: f64 = 0.031_622_776_601_683_79;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub lr: f64,
    /// Long-time: samples per optimizer step. Autoregressive: steps of one
    /// trajectory per optimizer step, 0 meaning the whole trajectory.
    pub batch_size: usize,
    /// Noise on normalized input geometry; `None` picks the task default.
    pub noise_std: Option<f64>,
    pub seed: u64,
    /// Clip the global gradient norm to this value.
    pub grad_clip: Option<f64>,
    pub target_space: TargetSpace,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::LongTime,
            epochs: 200,
            lr: 1e-3,
            batch_size: 1,
            noise_std: None,
            seed: 0,
            grad_clip: None,
            target_space: TargetSpace::Displacement,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn noise(&self) -> f64 {
        self.noise_std.unwrap_or(match self.task {
            Task::LongTime => 0.0,
            Task::Autoregressive => DEFAULT_NOISE_STD,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |key: &str, why: &str| Err(Error::Config(format!("training key `{key}`: {why}")));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be a finite nonnegative number");
        }
        if self.task == Task::LongTime && self.batch_size == 0 {
            return bad("batch_size", "must be at least 1 for long-time training");
        }
        if !(self.noise() >= 0.0 && self.noise().is_finite()) {
            return bad("noise_std", "must be a finite nonnegative number");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip", "must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (training loss when there
    /// is no validation data).
    pub best: Unisoma,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_good: Box<Unisoma>,
        history: Vec<EpochRecord>,
    },
    #[error(transparent)]
    Model(#[from] Error),
}

/// Samples used for training, grouped the way the task consumes them.
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    /// Independent (input, final target) samples.
    LongTime(&'a [SceneSample]),
    /// Trajectories of one-step samples.
    Autoregressive(&'a [Vec<SceneSample>]),
}

impl<'a> TrainData<'a> {
    fn task(&self) -> Task {
        match self {
            TrainData::LongTime(_) => Task::LongTime,
            TrainData::Autoregressive(_) => Task::Autoregressive,
        }
    }

    fn flat(&self) -> Vec<&'a SceneSample> {
        match *self {
            TrainData::LongTime(s) => s.iter().collect(),
            TrainData::Autoregressive(t) => t.iter().flatten().collect(),
        }
    }

    /// Optimizer batches as lists of flat sample indices.
    fn batches(&self, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        match *self {
            TrainData::LongTime(s) => {
                let mut order: Vec<usize> = (0..s.len()).collect();
                order.shuffle(rng);
                order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
            }
            TrainData::Autoregressive(trajs) => {
                let mut starts = Vec::with_capacity(trajs.len());
                let mut at = 0;
                for t in trajs {
                    starts.push((at, t.len()));
                    at += t.len();
                }
                starts.shuffle(rng);
                let mut out = Vec::new();
                for (start, len) in starts {
                    let size = if batch_size == 0 { len.max(1) } else { batch_size };
                    let ids: Vec<usize> = (start..start + len).collect();
                    out.extend(ids.chunks(size).map(<[usize]>::to_vec));
                }
                out
            }
        }
    }
}

fn relative_l2_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Option<Var>> {
    let norm = target.norm();
    if norm == 0.0 {
        return Ok(None);
    }
    let t = tape.constant(target.clone())?;
    let diff = tape.sub(pred, t)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    // Keeps the square root differentiable at an exact fit.
    let s = tape.add_scalar(s, 1e-30)?;
    let r = tape.sqrt(s)?;
    Ok(Some(tape.scale(r, 1.0 / norm)?))
}

fn mse_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone())?;
    let diff = tape.sub(pred, t)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Task loss of one sample on `tape`.
pub fn sample_loss(tape: &mut Tape, model: &Unisoma, params: &ModelParams, sample: &SceneSample, task: Task) -> Result<Var> {
    let input = model.prepare(sample)?;
    let preds = model.forward_with(tape, params, &input)?;
    let targets = model.normalized_targets(sample)?;
    let mut terms = Vec::new();
    for ((&pred, target), schema) in preds.iter().zip(&targets).zip(&model.schema.deformables) {
        match task {
            Task::LongTime => {
                for q in &schema.quantities {
                    let p = tape.narrow(pred, 1, q.start, q.len)?;
                    let t = target.narrow(1, q.start, q.len)?;
                    terms.extend(relative_l2_loss(tape, p, &t)?);
                }
            }
            Task::Autoregressive => terms.push(mse_loss(tape, pred, target)?),
        }
    }
    if terms.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    tape.add_all(&terms)
}

fn loss_and_grads(model: &Unisoma, sample: &SceneSample, task: Task) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let loss = sample_loss(&mut tape, model, &model.params, sample, task)?;
    let value = tape.value(loss).item().unwrap_or(f64::NAN);
    let grads = tape.backward(loss)?.into_params();
    Ok((value, grads))
}

/// Mean task loss over `samples` without noise.
pub fn mean_loss(model: &Unisoma, samples: &[&SceneSample], task: Task) -> Result<f64> {
    let mut losses = Vec::with_capacity(samples.len());
    for s in samples {
        let mut tape = Tape::new();
        let loss = sample_loss(&mut tape, model, &model.params, s, task)?;
        losses.push(tape.value(loss).item().unwrap_or(f64::NAN));
    }
    Ok(mean(&losses))
}

/// Adds `N(0, σ²)` noise, in normalized units, to the input geometry of
/// every deformable solid.
pub fn perturb_geometry(sample: &SceneSample, stats: &NormStats, sigma: f64, rng: &mut Rng) -> Result<SceneSample> {
    let mut out = sample.clone();
    for obj in &mut out.deformables {
        let std = &stats.input(&obj.name)?.std;
        for r in 0..obj.points.rows() {
            for (d, v) in obj.points.row_mut(r).iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z * std[d];
            }
        }
    }
    Ok(out)
}

fn clip(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let norm = libm::sqrt(grads.values().map(Tensor::sum_squares).sum::<f64>());
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
}

/// A model with freshly initialized parameters and statistics computed on
/// the training samples.
pub fn init_model(train: TrainData<'_>, config: &TrainConfig) -> Result<Unisoma> {
    config.validate()?;
    let flat = train.flat();
    let first = flat.first().ok_or_else(|| Error::Config("training split is empty".into()))?;
    let schema = SceneSchema::from_sample(first)?;
    for s in &flat {
        schema.check(s)?;
    }
    let learned: Vec<SceneSample> = flat
        .iter()
        .map(|s| to_learned_space(s, config.target_space))
        .collect::<Result<_>>()?;
    let stats = NormStats::compute(&learned)?;
    Unisoma::new(config.model.clone(), schema, stats, config.target_space, config.seed)
}

/// Trains from scratch. See [`train_from`].
pub fn train(train_data: TrainData<'_>, val: TrainData<'_>, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let model = init_model(train_data, config)?;
    train_from(model, train_data, val, config)
}

/// Runs `config.epochs` epochs of Adam on `model`, keeping the parameters
/// with the best validation loss.
pub fn train_from(mut model: Unisoma, train_data: TrainData<'_>, val: TrainData<'_>, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let task = train_data.task();
    if task != config.task || val.task() != task {
        return Err(Error::Config("training data does not match the configured task".into()).into());
    }
    let flat = train_data.flat();
    let val_flat = val.flat();
    let sigma = if task == Task::Autoregressive { config.noise() } else { 0.0 };
    let mut shuffle_rng = stream(config.seed, Stream::Shuffle);
    let mut noise_rng = stream(config.seed, Stream::Noise);
    let mut adam = Adam::new(config.lr);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=config.epochs {
        let mut per_sample = vec![0.0; flat.len()];
        for batch in train_data.batches(config.batch_size, &mut shuffle_rng) {
            let mut total: BTreeMap<String, Tensor> = model
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect();
            for &i in &batch {
                let sample = if sigma > 0.0 {
                    perturb_geometry(flat[i], &model.stats, sigma, &mut noise_rng)?
                } else {
                    flat[i].clone()
                };
                let (loss, grads) = match loss_and_grads(&model, &sample, task) {
                    Ok(r) => r,
                    Err(e) if matches!(e.root(), Error::NonFinite { .. }) => return Err(diverged(epoch, &model, best, history)),
                    Err(e) => return Err(e.into()),
                };
                if !loss.is_finite() {
                    return Err(diverged(epoch, &model, best, history));
                }
                per_sample[i] = loss;
                let w = 1.0 / batch.len() as f64;
                for (k, g) in grads {
                    let acc = total.get_mut(&k).ok_or_else(|| Error::KeyMismatch(k.clone()))?;
                    *acc = acc.add(&g.scale(w))?;
                }
            }
            if let Some(c) = config.grad_clip {
                clip(&mut total, c);
            }
            adam.step(&mut model.params, &total)?;
            if model.params.iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
                return Err(diverged(epoch, &model, best, history));
            }
        }
        let train_loss = mean(&per_sample);
        let val_loss = if val_flat.is_empty() {
            None
        } else {
            Some(mean_loss(&model, &val_flat, task)?)
        };
        let score = val_loss.unwrap_or(train_loss);
        if !score.is_finite() {
            return Err(diverged(epoch, &model, best, history));
        }
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, model.params.clone()));
        }
        history.push(EpochRecord { epoch, train_loss, val_loss });
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainOutcome {
        best: model,
        best_epoch,
        history,
    })
}

fn diverged(epoch: usize, model: &Unisoma, best: Option<(f64, usize, ModelParams)>, history: Vec<EpochRecord>) -> TrainError {
    let mut last_good = model.clone();
    if let Some((_, _, params)) = best {
        last_good.params = params;
    }
    TrainError::Diverged {
        epoch,
        last_good: Box::new(last_good),
        history,
    }
}

/// Anything that maps a sample to per-deformable target predictions in
/// data units.
pub trait Predictor {
    fn predict(&self, sample: &SceneSample) -> Result<Vec<Tensor>>;
}

impl Predictor for Unisoma {
    fn predict(&self, sample: &SceneSample) -> Result<Vec<Tensor>> {
        Unisoma::predict(self, sample)
    }
}

/// Predicts no motion: geometry equals the input points, other channels 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct Freeze;

impl Predictor for Freeze {
    fn predict(&self, sample: &SceneSample) -> Result<Vec<Tensor>> {
        sample
            .deformables
            .iter()
            .zip(&sample.targets)
            .map(|(obj, t)| {
                let mut out = Tensor::zeros(t.values.shape().to_vec());
                if let Some(q) = t.quantity(GEOMETRY) {
                    for r in 0..out.rows() {
                        out.row_mut(r)[q.start..q.start + 3].copy_from_slice(obj.points.row(r));
                    }
                }
                Ok(out)
            })
            .collect()
    }
}

/// Returns the sample's own targets.
#[derive(Clone, Copy, Debug, Default)]
pub struct GroundTruth;

impl Predictor for GroundTruth {
    fn predict(&self, sample: &SceneSample) -> Result<Vec<Tensor>> {
        Ok(sample.targets.iter().map(|t| t.values.clone()).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// Predictions at every step, one tensor per deformable solid.
    pub predictions: Vec<Vec<Tensor>>,
    pub metrics: TrajectoryMetrics,
}

fn geometry(values: &Tensor, sample: &SceneSample, solid: usize) -> Result<Tensor> {
    let q = sample.targets[solid]
        .quantity(GEOMETRY)
        .ok_or_else(|| Error::InvalidScene("targets have no geometry quantity".into()))?;
    values.narrow(1, q.start, 3)
}

/// Per solid and quantity, accumulates relative L2 (skipping zero
/// references) and RMSE across calls.
#[derive(Default)]
struct RowAccumulator {
    rows: Vec<(String, String, Vec<f64>, Vec<f64>)>,
}

impl RowAccumulator {
    fn add(&mut self, sample: &SceneSample, preds: &[Tensor]) -> Result<()> {
        for ((obj, target), pred) in sample.deformables.iter().zip(&sample.targets).zip(preds) {
            for q in &target.quantities {
                let u = target.values.narrow(1, q.start, q.len)?;
                let u_hat = pred.narrow(1, q.start, q.len)?;
                let pos = match self.rows.iter().position(|r| r.0 == obj.name && r.1 == q.name) {
                    Some(p) => p,
                    None => {
                        self.rows.push((obj.name.clone(), q.name.clone(), Vec::new(), Vec::new()));
                        self.rows.len() - 1
                    }
                };
                if u.norm() > 0.0 {
                    self.rows[pos].2.push(relative_l2(&u, &u_hat)?);
                }
                self.rows[pos].3.push(rmse(&u, &u_hat)?);
            }
        }
        Ok(())
    }

    fn finish(self) -> Vec<MetricRow> {
        self.rows
            .into_iter()
            .map(|(solid, quantity, rel, rm)| MetricRow {
                solid,
                quantity,
                relative_l2: (!rel.is_empty()).then(|| mean(&rel)),
                rmse: mean(&rm),
            })
            .collect()
    }
}

/// Feeds predictions back as input geometry for `steps` steps. Rigid motion
/// and loads come from the trajectory.
pub fn rollout<P: Predictor + ?Sized>(predictor: &P, trajectory: &[SceneSample], steps: usize) -> Result<Rollout> {
    if steps == 0 || steps > trajectory.len() {
        return Err(Error::Config(format!("rollout of {steps} steps over a trajectory of {}", trajectory.len())));
    }
    let mut current: Option<Vec<Tensor>> = None;
    let mut predictions = Vec::with_capacity(steps);
    let mut per_step = Vec::with_capacity(steps);
    let mut rows = RowAccumulator::default();
    for (t, truth) in trajectory.iter().take(steps).enumerate() {
        let mut frame = truth.clone();
        if let Some(geo) = &current {
            for (obj, g) in frame.deformables.iter_mut().zip(geo) {
                obj.points = g.clone();
            }
        }
        let preds = predictor.predict(&frame).map_err(|e| e.context(format!("rollout step {t}")))?;
        if preds.iter().any(|p| p.ensure_finite("rollout").is_err()) {
            return Err(Error::NonFinite { op: "rollout", index: t });
        }
        let mut step_rmse = Vec::with_capacity(preds.len());
        let mut next = Vec::with_capacity(preds.len());
        for (i, p) in preds.iter().enumerate() {
            let g = geometry(p, truth, i)?;
            step_rmse.push(rmse(&geometry(&truth.targets[i].values, truth, i)?, &g)?);
            next.push(g);
        }
        per_step.push(mean(&step_rmse));
        rows.add(truth, &preds)?;
        current = Some(next);
        predictions.push(preds);
    }
    Ok(Rollout {
        predictions,
        metrics: TrajectoryMetrics {
            rmse_all: mean(&per_step),
            per_step_rmse: per_step,
            quantities: rows.finish(),
            wall_clock_secs: None,
        },
    })
}

/// Per-solid, per-quantity metrics of one-shot predictions.
pub fn evaluate_longtime<P: Predictor + ?Sized>(predictor: &P, samples: &[SceneSample]) -> Result<Vec<MetricRow>> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let mut rows = RowAccumulator::default();
    for s in samples {
        rows.add(s, &predictor.predict(s)?)?;
    }
    Ok(rows.finish())
}

/// Full rollouts of every trajectory; rows average over all steps.
pub fn evaluate_rollouts<P: Predictor + ?Sized>(predictor: &P, trajectories: &[Vec<SceneSample>]) -> Result<(Vec<MetricRow>, Vec<TrajectoryMetrics>)> {
    if trajectories.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let metrics = trajectories
        .iter()
        .map(|t| Ok(rollout(predictor, t, t.len())?.metrics))
        .collect::<Result<Vec<_>>>()?;
    Ok((summarize_rollouts(&metrics), metrics))
}

/// Averages per-trajectory rows; relative L2 averages only over the
/// trajectories where it is defined.
pub fn summarize_rollouts(metrics: &[TrajectoryMetrics]) -> Vec<MetricRow> {
    let mut sums: Vec<(MetricRow, usize, usize)> = Vec::new();
    for row in metrics.iter().flat_map(|m| &m.quantities) {
        match sums.iter_mut().find(|(s, _, _)| s.solid == row.solid && s.quantity == row.quantity) {
            Some((s, n_rel, n)) => {
                if let Some(v) = row.relative_l2 {
                    *s.relative_l2.get_or_insert(0.0) += v;
                    *n_rel += 1;
                }
                s.rmse += row.rmse;
                *n += 1;
            }
            None => sums.push((row.clone(), usize::from(row.relative_l2.is_some()), 1)),
        }
    }
    sums.into_iter()
        .map(|(mut s, n_rel, n)| {
            s.relative_l2 = s.relative_l2.map(|v| v / n_rel as f64);
            s.rmse /= n as f64;
            s
        })
        .collect()
}
