//! Epoch driver, callbacks, evaluation and training history.
//!
//! Callbacks run after validation in a fixed order: checkpoint (on a strict
//! validation-loss improvement), plateau reduction, early stopping.

pub mod checkpoint;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::augment::AugmentConfig;
use crate::data::{batch_plan, split_train_val, BatchIter, DataError, Dataset, PREFETCH_CHUNK};
use crate::layers::Mode;
use crate::metrics::{build_report, ConfusionMatrix, EvalReport, MetricsError};
use crate::model::{ModelError, ModelGraph};
use crate::optim::{LrController, OptimError, OptimizerState, PlateauReducer, Rule};
use crate::tensor::{cross_entropy, Element, Tape, Tensor, TensorError};
use checkpoint::{save_checkpoint, Checkpoint, CheckpointError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("label {label} out of range for a {classes}-class model")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: u64, batch: usize },
    #[error("model has no classification head")]
    NoHead,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: u64,
    pub batch_size: usize,
    pub val_fraction: f64,
    /// `None` disables early stopping.
    pub early_stop_patience: Option<u64>,
    pub restore_best: bool,
    /// `None` disables plateau reduction.
    pub plateau: Option<PlateauReducer>,
    /// Cosine decay over all planned steps.
    pub cosine: bool,
    pub optimizer: Rule,
    pub base_lr: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub augment: AugmentConfig,
    pub prefetch_chunk: usize,
    /// Written whenever validation loss improves.
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainConfig {
    /// Training from scratch: 20 epochs, constant rate, plateau reduction.
    pub fn baseline() -> Self {
        Self {
            max_epochs: 20,
            batch_size: 32,
            val_fraction: 0.2,
            early_stop_patience: Some(5),
            restore_best: true,
            plateau: Some(PlateauReducer::default()),
            cosine: false,
            optimizer: Rule::adam(),
            base_lr: 1e-3,
            seed: 0,
            shuffle: true,
            augment: AugmentConfig::default(),
            prefetch_chunk: PREFETCH_CHUNK,
            checkpoint_path: None,
        }
    }

    /// Partial fine-tuning: 12 epochs, cosine decay from a small rate.
    pub fn fine_tune() -> Self {
        Self {
            max_epochs: 12,
            cosine: true,
            base_lr: 1e-4,
            ..Self::baseline()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.early_stop_patience == Some(0) {
            return bad("early-stopping patience must be at least 1".into());
        }
        if let Some(p) = &self.plateau {
            if !(p.factor > 0.0 && p.factor < 1.0) || p.patience == 0 || p.min_lr < 0.0 {
                return bad("plateau needs 0 < factor < 1, patience >= 1, min_lr >= 0".into());
            }
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad(format!("learning rate {} must be non-negative", self.base_lr));
        }
        self.augment.validate().map_err(TrainError::InvalidConfig)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum CallbackEvent {
    Checkpoint { val_loss: f64 },
    PlateauReduce { multiplier: f64 },
    EarlyStop { best_epoch: u64 },
    RestoreBest { epoch: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Rate at the epoch's first step.
    pub lr: f64,
    pub wall_time_s: f64,
    pub events: Vec<CallbackEvent>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc,lr\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr
        );
    }
    out
}

/// Mean loss and accuracy over one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassStats {
    pub loss: f64,
    pub acc: f64,
}

/// Something the epoch driver can train, validate, snapshot and restore.
pub trait EpochLearner {
    type Snapshot: Clone;

    /// One epoch over the training data. `step` is the global step counter.
    fn train_epoch(&mut self, epoch: u64, lr: &LrController, step: &mut u64) -> Result<PassStats>;
    fn validate(&mut self) -> Result<PassStats>;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: Self::Snapshot);
    /// Called when validation loss improves, after the snapshot is taken.
    fn on_checkpoint(&mut self, _epoch: u64, _best: &Self::Snapshot, _val: PassStats, _lr: &LrController) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CallbackConfig {
    pub max_epochs: u64,
    pub early_stop_patience: Option<u64>,
    pub restore_best: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome<S> {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<u64>,
    pub best: Option<(S, PassStats)>,
    pub stopped_early: bool,
    pub steps: u64,
}

pub fn run_epochs<L: EpochLearner>(
    learner: &mut L,
    cfg: CallbackConfig,
    lr: &mut LrController,
) -> Result<RunOutcome<L::Snapshot>> {
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(L::Snapshot, PassStats)> = None;
    let mut best_epoch = None;
    let mut best_loss = f64::INFINITY;
    let mut stopped_early = false;
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let lr_used = lr.lr_at(step);
        let train = learner.train_epoch(epoch, lr, &mut step)?;
        let val = learner.validate()?;
        if !val.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: 0 });
        }
        let mut events = Vec::new();

        if val.loss < best_loss {
            best_loss = val.loss;
            best_epoch = Some(epoch);
            let snap = learner.snapshot();
            learner.on_checkpoint(epoch, &snap, val, lr)?;
            best = Some((snap, val));
            events.push(CallbackEvent::Checkpoint { val_loss: val.loss });
        }
        if lr.end_epoch(val.loss) {
            events.push(CallbackEvent::PlateauReduce {
                multiplier: lr.multiplier,
            });
        }
        let stop = match (cfg.early_stop_patience, best_epoch) {
            (Some(p), Some(b)) => epoch - b >= p,
            _ => false,
        };
        if stop {
            events.push(CallbackEvent::EarlyStop {
                best_epoch: best_epoch.unwrap_or(0),
            });
            stopped_early = true;
        }
        let last = stop || epoch == cfg.max_epochs;
        if last && cfg.restore_best && best_epoch != Some(epoch) {
            if let (Some((snap, _)), Some(b)) = (&best, best_epoch) {
                learner.restore(snap.clone());
                events.push(CallbackEvent::RestoreBest { epoch: b });
            }
        }
        history.push(EpochRecord {
            epoch,
            train_loss: train.loss,
            train_acc: train.acc,
            val_loss: val.loss,
            val_acc: val.acc,
            lr: lr_used,
            wall_time_s: start.elapsed().as_secs_f64(),
            events,
        });
        if stop {
            break;
        }
    }
    Ok(RunOutcome {
        history,
        best_epoch,
        best,
        stopped_early,
        steps: step,
    })
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub const EVAL_BATCH: usize = 64;

fn check_labels<T: Element>(model: &ModelGraph<T>, data: &Dataset) -> Result<usize> {
    let classes = model.classes().ok_or(TrainError::NoHead)?;
    if let Some(s) = data.samples.iter().find(|s| s.label >= classes) {
        return Err(TrainError::LabelOutOfRange {
            label: s.label,
            classes,
        });
    }
    Ok(classes)
}

/// Inference-mode probabilities for every sample, row-major `N x K`.
pub fn predict_dataset<T: Element>(model: &mut ModelGraph<T>, data: &Dataset) -> Result<Vec<f64>> {
    let plan = batch_plan(data.len(), EVAL_BATCH, false, 0, 0);
    let mut probs = Vec::new();
    for batch in BatchIter::<T>::new(data, plan, None, PREFETCH_CHUNK) {
        probs.extend(model.predict(&batch.x)?.to_f64_vec());
    }
    Ok(probs)
}

fn pass_stats(probs: &[f64], labels: &[usize], classes: usize) -> Result<PassStats> {
    let n = labels.len();
    let p = Tensor::<f64>::new(probs.to_vec(), &[n, classes])?;
    let tape = Tape::new();
    let loss = cross_entropy(&tape.constant(p), labels)?.value().item()?;
    let correct = probs
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(PassStats {
        loss,
        acc: correct as f64 / n as f64,
    })
}

/// Mean cross-entropy and accuracy in inference mode.
pub fn evaluate_loss<T: Element>(model: &mut ModelGraph<T>, data: &Dataset) -> Result<PassStats> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset("nothing to evaluate".into()));
    }
    let classes = check_labels(model, data)?;
    let probs = predict_dataset(model, data)?;
    pass_stats(&probs, &data.labels(), classes)
}

pub fn evaluate<T: Element>(
    model: &mut ModelGraph<T>,
    data: &Dataset,
    model_id: &str,
    dataset_id: &str,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset("nothing to evaluate".into()));
    }
    let classes = check_labels(model, data)?;
    if data.classes() != classes {
        return Err(TrainError::InvalidConfig(format!(
            "dataset has {} classes, model has {classes}",
            data.classes()
        )));
    }
    let probs = predict_dataset(model, data)?;
    let labels = data.labels();
    let preds: Vec<usize> = probs.chunks(classes).map(argmax).collect();
    let cm = ConfusionMatrix::from_predictions(data.class_names.clone(), &labels, &preds)?;
    Ok(build_report(&cm, Some(&probs), &labels, model_id, dataset_id)?)
}

/// Trains a model with an optimizer on fixed train/validation sets.
pub struct ModelLearner<'a, T: Element> {
    pub model: ModelGraph<T>,
    pub optimizer: OptimizerState<T>,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub cfg: TrainConfig,
    classes: usize,
}

impl<'a, T: Element> ModelLearner<'a, T> {
    pub fn new(model: ModelGraph<T>, train: &'a Dataset, val: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = OptimizerState::new(cfg.optimizer, cfg.base_lr)?;
        let classes = check_labels(&model, train)?;
        check_labels(&model, val)?;
        if train.is_empty() || val.is_empty() {
            return Err(TrainError::EmptyDataset("training and validation sets must be non-empty".into()));
        }
        Ok(Self {
            model,
            optimizer,
            train,
            val,
            cfg,
            classes,
        })
    }

    /// Batches of one epoch. A trailing single-sample batch is merged into
    /// the previous one, since batch statistics need at least two samples.
    pub fn epoch_plan(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut plan = batch_plan(self.train.len(), self.cfg.batch_size, self.cfg.shuffle, self.cfg.seed, epoch);
        if plan.len() >= 2 && plan.last().map(Vec::len) == Some(1) {
            let tail = plan.pop().unwrap();
            plan.last_mut().unwrap().extend(tail);
        }
        plan
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.epoch_plan(1).len() as u64
    }

    pub fn checkpoint(&self, epoch: u64, val: Option<PassStats>, lr: &LrController) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            lr_controller: Some(lr.clone()),
            epoch,
            best_val_loss: val.map(|v| v.loss),
            best_val_acc: val.map(|v| v.acc),
            class_names: self.train.class_names.clone(),
        }
    }
}

impl<T: Element> EpochLearner for ModelLearner<'_, T> {
    type Snapshot = ModelGraph<T>;

    fn train_epoch(&mut self, epoch: u64, lr: &LrController, step: &mut u64) -> Result<PassStats> {
        let plan = self.epoch_plan(epoch);
        let augment = self.cfg.augment.enabled.then_some((&self.cfg.augment, self.cfg.seed, epoch));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, batch) in BatchIter::<T>::new(self.train, plan, augment, self.cfg.prefetch_chunk).enumerate() {
            let tape = Tape::new();
            let mut ctx = self.model.context(&tape, Mode::Train);
            let x = tape.constant(batch.x);
            let probs = self.model.forward(&mut ctx, &x)?;
            let loss = cross_entropy(&probs, &batch.labels)?;
            let value = loss.value().item()?.as_f64();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            if ctx.has_trainable_bindings() {
                tape.backward(&loss)?;
                let mut grads = ctx.gradients();
                self.optimizer.set_lr(lr.lr_at(*step))?;
                self.optimizer.apply_step(&mut self.model, &mut grads)?;
            }
            *step += 1;
            let n = batch.labels.len();
            loss_sum += value * n as f64;
            seen += n;
            let p = probs.value().to_f64_vec();
            correct += p
                .chunks(self.classes)
                .zip(&batch.labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
        }
        Ok(PassStats {
            loss: loss_sum / seen as f64,
            acc: correct as f64 / seen as f64,
        })
    }

    fn validate(&mut self) -> Result<PassStats> {
        evaluate_loss(&mut self.model, self.val)
    }

    fn snapshot(&self) -> ModelGraph<T> {
        self.model.clone()
    }

    fn restore(&mut self, snapshot: ModelGraph<T>) {
        // keep the current trainable flags and dropout stream position
        let rng = self.model.rng_state();
        self.model = snapshot;
        self.model.set_rng_state(rng);
    }

    fn on_checkpoint(&mut self, epoch: u64, best: &ModelGraph<T>, val: PassStats, lr: &LrController) -> Result<()> {
        if let Some(path) = &self.cfg.checkpoint_path {
            let mut ck = self.checkpoint(epoch, Some(val), lr);
            ck.model = best.clone();
            save_checkpoint(&ck, path)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult<T: Element> {
    pub model: ModelGraph<T>,
    pub optimizer: OptimizerState<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<u64>,
    pub best_val: Option<PassStats>,
    pub stopped_early: bool,
    pub lr: LrController,
}

impl<T: Element> TrainResult<T> {
    pub fn checkpoint(&self, class_names: Vec<String>) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            lr_controller: Some(self.lr.clone()),
            epoch: self.history.last().map_or(0, |r| r.epoch),
            best_val_loss: self.best_val.map(|v| v.loss),
            best_val_acc: self.best_val.map(|v| v.acc),
            class_names,
        }
    }
}

/// Trains on explicit train/validation sets.
pub fn train_with_split<T: Element>(
    model: ModelGraph<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainResult<T>> {
    let mut learner = ModelLearner::new(model, train, val, cfg.clone())?;
    let horizon = cfg.max_epochs * learner.steps_per_epoch();
    let mut lr = LrController::new(cfg.base_lr, cfg.cosine.then_some(horizon), cfg.plateau);
    let outcome = run_epochs(
        &mut learner,
        CallbackConfig {
            max_epochs: cfg.max_epochs,
            early_stop_patience: cfg.early_stop_patience,
            restore_best: cfg.restore_best,
        },
        &mut lr,
    )?;
    Ok(TrainResult {
        model: learner.model,
        optimizer: learner.optimizer,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        best_val: outcome.best.map(|(_, v)| v),
        stopped_early: outcome.stopped_early,
        lr,
    })
}

/// Holds out a stratified validation subset and trains on the rest.
pub fn train<T: Element>(model: ModelGraph<T>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainResult<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset("no training samples".into()));
    }
    check_labels(&model, data)?;
    let (train, val) = split_train_val(data, cfg.val_fraction, cfg.seed)?;
    train_with_split(model, &train, &val, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Replays a fixed validation-loss sequence; the "parameters" are the
    /// epoch index that produced them.
    struct Scripted {
        losses: Vec<f64>,
        epoch: usize,
        params: usize,
    }

    impl EpochLearner for Scripted {
        type Snapshot = usize;
        fn train_epoch(&mut self, epoch: u64, _: &LrController, step: &mut u64) -> Result<PassStats> {
            self.epoch = epoch as usize;
            self.params = epoch as usize;
            *step += 1;
            Ok(PassStats { loss: 1.0, acc: 0.5 })
        }
        fn validate(&mut self) -> Result<PassStats> {
            Ok(PassStats {
                loss: self.losses[self.params - 1],
                acc: 0.5,
            })
        }
        fn snapshot(&self) -> usize {
            self.params
        }
        fn restore(&mut self, s: usize) {
            self.params = s;
        }
    }

    #[test]
    fn early_stop_trace() {
        let mut l = Scripted {
            losses: vec![0.50, 0.40, 0.45, 0.46, 0.44, 0.41, 0.43, 0.30, 0.2],
            epoch: 0,
            params: 0,
        };
        let mut lr = LrController::new(1e-3, None, None);
        let cfg = CallbackConfig {
            max_epochs: 20,
            early_stop_patience: Some(5),
            restore_best: true,
        };
        let out = run_epochs(&mut l, cfg, &mut lr).unwrap();
        assert_eq!(out.history.len(), 7);
        assert!(out.stopped_early);
        assert_eq!(out.best_epoch, Some(2));
        assert_eq!(l.params, 2);
        assert_eq!(l.validate().unwrap().loss, 0.40);
        assert_eq!(
            out.history[6].events,
            vec![CallbackEvent::EarlyStop { best_epoch: 2 }, CallbackEvent::RestoreBest { epoch: 2 }]
        );
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut l = Scripted {
            losses: vec![],
            epoch: 0,
            params: 0,
        };
        let mut lr = LrController::new(1e-3, None, None);
        let cfg = CallbackConfig {
            max_epochs: 0,
            early_stop_patience: Some(5),
            restore_best: true,
        };
        let out = run_epochs(&mut l, cfg, &mut lr).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(l.params, 0);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn history_csv_header() {
        assert_eq!(history_csv(&[]), "epoch,train_loss,train_acc,val_loss,val_acc,lr\n");
    }
}
