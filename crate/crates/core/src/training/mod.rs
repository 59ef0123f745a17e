//! Optimization: Adam, gradient clipping and the epoch loop.
//!
//! Every source of randomness is derived from `(seed, epoch)`, so a run
//! resumed from a checkpoint after epoch `e` replays epoch `e + 1` exactly
//! as an uninterrupted run would.

mod adam;

pub use adam::{adam_update, clip_grad_norm, global_norm, Adam, AdamConfig};

use crate::dataset::{normalize, Dataset, DatasetError, Trajectory};
use crate::labeling::MacroIntentSequence;
use crate::models::{labels_tensor, states_tensor, Model, ModelCheckpoint, ModelError, TrainingState, Variant};
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged in epoch {epoch}, batch {batch}: {reason}")]
    Diverged { epoch: usize, batch: usize, reason: String, last_good: Box<ModelCheckpoint> },
}

impl From<candle_core::Error> for TrainError {
    fn from(e: candle_core::Error) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Linear annealing of the gumbel-softmax temperature across epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
}

impl TauSchedule {
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.start;
        }
        self.start + (self.end - self.start) * epoch as f64 / (epochs - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm bound, per optimizer.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Evaluate on the held-out split every this many epochs (0 = never).
    pub eval_every: usize,
    /// Latent paths per sequence in the training ELBO.
    pub elbo_samples: usize,
    #[serde(default)]
    pub lambda_mi: Option<f64>,
    #[serde(default)]
    pub tau_schedule: Option<TauSchedule>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 64,
            epochs: 50,
            clip_norm: Some(10.0),
            seed: 0,
            eval_every: 1,
            elbo_samples: 1,
            lambda_mi: None,
            tau_schedule: None,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted so that a run can be replayed without updates.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(TrainError::Config("lr must be finite and non-negative".into()));
        }
        if self.batch_size == 0 || self.elbo_samples == 0 {
            return Err(TrainError::Config("batch_size and elbo_samples must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(TrainError::Config("clip_norm must be positive".into()));
            }
        }
        if let Some(s) = self.tau_schedule {
            if !(s.start > 0.0 && s.end > 0.0) {
                return Err(TrainError::Config("temperatures must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean per-sequence training objective during the epoch: ELBO for the
    /// agent model (log-likelihood for rnn-gauss), `L1 + lambda * L2` for
    /// vrae-mi.
    pub train_elbo: f64,
    pub train_macro_nll: Option<f64>,
    pub test_elbo: Option<f64>,
    pub test_macro_nll: Option<f64>,
    pub wall_seconds: f64,
    pub param_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub config: TrainConfig,
    pub epochs: Vec<EpochReport>,
    pub param_checksum: String,
    pub wall_seconds: f64,
}

/// Training and optional held-out data with their macro-intent labels.
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub train_labels: Option<&'a [MacroIntentSequence]>,
    pub test: Option<&'a Dataset>,
    pub test_labels: Option<&'a [MacroIntentSequence]>,
}

struct Prepared<'a> {
    trajs: Vec<Trajectory>,
    labels: Option<&'a [MacroIntentSequence]>,
}

fn prepare<'a>(model: &Model, data: &Dataset, labels: Option<&'a [MacroIntentSequence]>) -> Result<Prepared<'a>> {
    let shape = data.shape().ok_or_else(|| TrainError::Config("empty dataset".into()))?;
    if (shape.1, shape.2) != (model.config.agents, model.config.dim) {
        return Err(TrainError::Config(format!(
            "dataset has K={}, d={}, model expects K={}, d={}",
            shape.1, shape.2, model.config.agents, model.config.dim
        )));
    }
    if model.config.is_hierarchical() {
        let labels = labels.ok_or_else(|| TrainError::Config("the hierarchical model needs macro-intent labels".into()))?;
        if labels.len() != data.len() {
            return Err(TrainError::Config(format!("{} label sequences for {} trajectories", labels.len(), data.len())));
        }
        for l in labels {
            if l.len() != shape.0 || l.agents() != shape.1 || l.categories() != model.config.macro_categories {
                return Err(TrainError::Config("labels do not match the trajectories or the model's category count".into()));
            }
        }
    }
    let trajs = data.trajectories().iter().map(|t| normalize(t, &model.norm)).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Prepared { trajs, labels: if model.config.is_hierarchical() { labels } else { None } })
}

/// Scalar losses for one minibatch; `agent` is the negated mean objective.
struct BatchLoss {
    objective: Tensor,
    macro_nll: Option<Tensor>,
}

fn batch_loss(model: &Model, p: &Prepared, idx: &[usize], samples: usize, lambda: f64, rng: &mut ChaCha8Rng) -> std::result::Result<BatchLoss, ModelError> {
    let dtype = model.dtype();
    let refs: Vec<&Trajectory> = idx.iter().map(|&i| &p.trajs[i]).collect();
    let x = states_tensor(&refs, dtype)?;
    if let Some(v) = model.vrae() {
        let terms = v.objective(&x, rng)?;
        let obj = (terms.elbo + (terms.mi_bound * lambda)?)?;
        return Ok(BatchLoss { objective: obj.mean(0)?, macro_nll: None });
    }
    let agent = model.agent().expect("agent model");
    let (g, labels) = match p.labels {
        Some(l) => {
            let refs: Vec<&MacroIntentSequence> = idx.iter().map(|&i| &l[i]).collect();
            let (g, lab) = labels_tensor(&refs, dtype)?;
            (Some(g), Some(lab))
        }
        None => (None, None),
    };
    let elbo = agent.sequence_elbo(&x, g.as_ref(), rng, samples)?.elbo;
    let macro_nll = match (model.macro_model(), &g, &labels) {
        (Some(m), Some(g), Some(lab)) => Some(m.macro_nll(&x, g, lab)?.mean(0)?),
        _ => None,
    };
    Ok(BatchLoss { objective: elbo.mean(0)?, macro_nll })
}

fn epoch_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 8) | purpose);
    rng
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Trains `model` in place and returns the final checkpoint (with optimizer
/// state) and the per-epoch report. Passing the `TrainingState` of an
/// earlier checkpoint resumes after its last completed epoch.
pub fn train(
    model: &mut Model,
    data: &TrainData,
    cfg: &TrainConfig,
    resume: Option<&TrainingState>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<(ModelCheckpoint, TrainReport)> {
    cfg.validate()?;
    if let Some(l) = cfg.lambda_mi {
        model.config.lambda_mi = l;
    }
    let lambda = model.config.lambda_mi;
    let train = prepare(model, data.train, data.train_labels)?;
    let test = match data.test {
        Some(t) => Some(prepare(model, t, data.test_labels)?),
        None => None,
    };
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let groups: Vec<&str> = match model.config.variant {
        Variant::VraeMi => vec!["vrae"],
        Variant::Hierarchical => vec!["agent", "macro"],
        _ => vec!["agent"],
    };
    let mut optimizers: BTreeMap<String, Adam> = BTreeMap::new();
    for g in &groups {
        optimizers.insert(g.to_string(), Adam::new(model.params().with_prefix(&format!("{g}.")), adam_cfg)?);
    }
    let mut start = 0;
    if let Some(state) = resume {
        start = state.epochs_completed;
        for (g, opt) in optimizers.iter_mut() {
            if let Some(snap) = state.optimizers.get(g) {
                opt.restore(snap)?;
            }
        }
    }
    let started = Instant::now();
    let mut report = TrainReport { variant: model.config.variant, config: cfg.clone(), epochs: Vec::new(), param_checksum: String::new(), wall_seconds: 0.0 };
    let mut last_good = model.checkpoint()?;
    for epoch in start..cfg.epochs {
        let epoch_start = Instant::now();
        if let (Some(s), Some(_)) = (cfg.tau_schedule, model.vrae()) {
            model.set_gumbel_tau(s.at(epoch, cfg.epochs))?;
        }
        let mut order: Vec<usize> = (0..train.trajs.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch, 0));
        let mut noise = epoch_rng(cfg.seed, epoch, 1);
        let (mut obj_sum, mut nll_sum) = (0.0, 0.0);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |reason: String, last_good: &ModelCheckpoint| TrainError::Diverged {
                epoch,
                batch: bi,
                reason,
                last_good: Box::new(last_good.clone()),
            };
            let loss = match batch_loss(model, &train, idx, cfg.elbo_samples, lambda, &mut noise) {
                Ok(l) => l,
                Err(e @ ModelError::NonFinite { .. }) => return Err(diverged(e.to_string(), &last_good)),
                Err(e) => return Err(e.into()),
            };
            let obj = scalar(&loss.objective)?;
            let nll = loss.macro_nll.as_ref().map(scalar).transpose()?;
            if !obj.is_finite() || nll.is_some_and(|v| !v.is_finite()) {
                return Err(diverged("non-finite loss".into(), &last_good));
            }
            obj_sum += obj * idx.len() as f64;
            nll_sum += nll.unwrap_or(0.0) * idx.len() as f64;
            let mut total = loss.objective.neg()?;
            if let Some(n) = &loss.macro_nll {
                total = (total + n)?;
            }
            let grads = total.backward()?;
            for opt in optimizers.values_mut() {
                let norm = opt.step(&grads, cfg.clip_norm)?;
                if !norm.is_finite() {
                    return Err(diverged("non-finite gradient".into(), &last_good));
                }
            }
        }
        let n = train.trajs.len() as f64;
        let evaluate_now = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        let (test_elbo, test_macro_nll) = match (&test, evaluate_now) {
            (Some(t), true) => {
                let e = average_elbo(model, t, 1, cfg.seed ^ 0x7e57)?;
                let m = if model.macro_model().is_some() { Some(average_macro_nll(model, t)?) } else { None };
                (Some(e), m)
            }
            _ => (None, None),
        };
        let epoch_report = EpochReport {
            epoch,
            train_elbo: obj_sum / n,
            train_macro_nll: model.macro_model().map(|_| nll_sum / n),
            test_elbo,
            test_macro_nll,
            wall_seconds: epoch_start.elapsed().as_secs_f64(),
            param_checksum: model.params().checksum("")?,
        };
        on_epoch(&epoch_report);
        report.epochs.push(epoch_report);
        last_good = model.checkpoint()?;
    }
    let mut ckpt = model.checkpoint()?;
    let mut snaps = BTreeMap::new();
    for (g, opt) in &optimizers {
        snaps.insert(g.clone(), opt.snapshot()?);
    }
    ckpt.training = Some(TrainingState { epochs_completed: cfg.epochs.max(start), seed: cfg.seed, optimizers: snaps });
    report.param_checksum = model.params().checksum("")?;
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((ckpt, report))
}

const EVAL_BATCH: usize = 256;

fn average_elbo(model: &Model, p: &Prepared, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..p.trajs.len()).collect();
    let mut sum = 0.0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let refs: Vec<&Trajectory> = chunk.iter().map(|&i| &p.trajs[i]).collect();
        let x = states_tensor(&refs, model.dtype())?.detach();
        let elbo = if let Some(v) = model.vrae() {
            v.objective(&x, &mut rng)?.elbo
        } else {
            let g = match p.labels {
                Some(l) => Some(labels_tensor(&chunk.iter().map(|&i| &l[i]).collect::<Vec<_>>(), model.dtype())?.0),
                None => None,
            };
            model.agent().expect("agent model").sequence_elbo(&x, g.as_ref(), &mut rng, samples)?.elbo
        };
        sum += scalar(&elbo.sum(0)?)?;
    }
    Ok(sum / p.trajs.len() as f64)
}

fn average_macro_nll(model: &Model, p: &Prepared) -> Result<f64> {
    let m = model.macro_model().ok_or_else(|| TrainError::Config("model has no macro-intent model".into()))?;
    let labels = p.labels.ok_or_else(|| TrainError::Config("macro-intent labels required".into()))?;
    let idx: Vec<usize> = (0..p.trajs.len()).collect();
    let mut sum = 0.0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let refs: Vec<&Trajectory> = chunk.iter().map(|&i| &p.trajs[i]).collect();
        let x = states_tensor(&refs, model.dtype())?;
        let (g, lab) = labels_tensor(&chunk.iter().map(|&i| &labels[i]).collect::<Vec<_>>(), model.dtype())?;
        sum += scalar(&m.macro_nll(&x, &g, &lab)?.sum(0)?)?;
    }
    Ok(sum / p.trajs.len() as f64)
}

/// Mean per-sequence ELBO over a raw (unnormalized) dataset: the exact
/// log-likelihood for rnn-gauss, `L1` for vrae-mi. `labels` are required
/// for the hierarchical model. Deterministic for a fixed `seed`.
pub fn evaluate_avg_elbo(model: &Model, data: &Dataset, labels: Option<&[MacroIntentSequence]>, samples: usize, seed: u64) -> Result<f64> {
    let p = prepare(model, data, labels)?;
    average_elbo(model, &p, samples, seed)
}

/// Mean per-sequence macro-intent negative log-likelihood.
pub fn evaluate_macro_nll(model: &Model, data: &Dataset, labels: &[MacroIntentSequence]) -> Result<f64> {
    let p = prepare(model, data, Some(labels))?;
    average_macro_nll(model, &p)
}
