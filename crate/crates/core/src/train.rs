//! Balanced loss and accuracy, the supervised training loop with early
//! stopping on validation loss, and evaluation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Batch;
use crate::engine::optim::{AdamWConfig, OptimizerState};
use crate::engine::{Graph, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{bail, Error, Result};
use crate::models::{ArchKind, BnBuffer, Mode, Model};
use crate::seed;

pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_arch(kind: ArchKind, seed: u64) -> Self {
        Self { learning_rate: kind.learning_rate(), weight_decay: 5e-4, max_epochs: 200, patience: 50, batch_size: DEFAULT_BATCH_SIZE, seed }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(InvalidArgument, "batch size must be at least 1");
        }
        if self.max_epochs == 0 {
            bail!(InvalidArgument, "max_epochs must be at least 1");
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            bail!(InvalidArgument, "patience {} must lie in 1..={}", self.patience, self.max_epochs);
        }
        self.adamw().validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig::new(self.learning_rate, self.weight_decay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were returned.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    /// Every subject whose trials contributed to a gradient update.
    pub update_subjects: BTreeSet<String>,
}

impl TrainReport {
    pub fn last_epoch(&self) -> usize {
        self.epochs.len()
    }

    /// Best validation loss seen up to each epoch.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.epochs
            .iter()
            .map(|e| {
                best = best.min(e.val_loss);
                best
            })
            .collect()
    }

    pub fn best_val_balanced_accuracy(&self) -> f64 {
        self.epochs[self.best_epoch - 1].val_balanced_accuracy
    }
}

/// `w_k = N / (K N_k)` from training-split class counts.
pub fn class_weights(class_counts: &[usize]) -> Result<Vec<f64>> {
    let k = class_counts.len();
    if k == 0 {
        bail!(InvalidArgument, "no classes");
    }
    if let Some(c) = class_counts.iter().position(|&n| n == 0) {
        bail!(EmptySplit, "class {c} has no training trials");
    }
    let n: usize = class_counts.iter().sum();
    Ok(class_counts.iter().map(|&nk| n as f64 / (k as f64 * nk as f64)).collect())
}

pub fn count_classes(labels: &[usize], n_classes: usize) -> Result<Vec<usize>> {
    let mut counts = alloc::vec![0usize; n_classes];
    for &y in labels {
        if y >= n_classes {
            bail!(InvalidArgument, "label {y} out of range for {n_classes} classes");
        }
        counts[y] += 1;
    }
    Ok(counts)
}

/// Weighted cross-entropy normalized by the sum of applied class weights.
pub fn balanced_cross_entropy<T: Scalar>(scores: &Tensor<T>, labels: &[usize], class_counts: &[usize]) -> Result<f64> {
    let w: Vec<T> = class_weights(class_counts)?.into_iter().map(T::of).collect();
    let mut g = Graph::new();
    let s = g.input(scores.clone());
    let l = g.weighted_cross_entropy(s, labels, &w)?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<usize>> {
    let s = scores.shape();
    if s.len() != 2 || s[1] == 0 {
        bail!(Shape, "argmax expects [n, k] scores, got {:?}", s);
    }
    Ok(scores
        .data()
        .chunks(s[1])
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

pub fn per_class_recalls(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    if predictions.len() != labels.len() {
        bail!(Shape, "{} predictions for {} labels", predictions.len(), labels.len());
    }
    let counts = count_classes(labels, n_classes)?;
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        bail!(EmptySplit, "class {c} absent from labels");
    }
    let mut hits = alloc::vec![0usize; n_classes];
    for (p, y) in predictions.iter().zip(labels) {
        if p == y {
            hits[*y] += 1;
        }
    }
    Ok(hits.iter().zip(&counts).map(|(h, n)| *h as f64 / *n as f64).collect())
}

pub fn balanced_accuracy(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let r = per_class_recalls(predictions, labels, n_classes)?;
    Ok(r.iter().sum::<f64>() / n_classes as f64)
}

/// Something trainable by the shared epoch loop.
trait Learner {
    type Snapshot;
    /// One optimizer step on the given training rows; returns the batch loss.
    fn step(&mut self, rows: &[usize], dropout: &mut ChaCha8Rng) -> Result<f64>;
    /// Validation loss and balanced accuracy with frozen behaviour.
    fn validate(&self) -> Result<(f64, f64)>;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, s: Self::Snapshot);
}

fn run_loop<L: Learner>(learner: &mut L, n_train: usize, train_subjects: &[String], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if n_train == 0 {
        bail!(EmptySplit, "empty training set");
    }
    let mut shuffle = seed::derived_rng(cfg.seed, &[b"shuffle"]);
    let mut dropout = seed::derived_rng(cfg.seed, &[b"dropout"]);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, L::Snapshot)> = None;
    let mut since_best = 0;
    let mut used = BTreeSet::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let loss = learner.step(rows, &mut dropout)?;
            if !loss.is_finite() {
                bail!(Divergence, "non-finite training loss at epoch {epoch}");
            }
            total += loss * rows.len() as f64;
            for &r in rows {
                if !used.contains(&train_subjects[r]) {
                    used.insert(train_subjects[r].clone());
                }
            }
        }
        let (val_loss, val_bacc) = learner.validate()?;
        if !val_loss.is_finite() {
            bail!(Divergence, "non-finite validation loss at epoch {epoch}");
        }
        epochs.push(EpochRecord { epoch, train_loss: total / n_train as f64, val_loss, val_balanced_accuracy: val_bacc });
        if best.as_ref().map_or(true, |(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, learner.snapshot()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    let (best_epoch, best_val_loss, snap) = best.expect("at least one epoch ran");
    learner.restore(snap);
    Ok(TrainReport { epochs, best_epoch, best_val_loss, stop_reason, update_subjects: used })
}

fn check_split<T: Scalar>(b: &Batch<T>, what: &str) -> Result<()> {
    if b.is_empty() {
        bail!(EmptySplit, "empty {what} split");
    }
    Ok(())
}

struct FullModel<'a> {
    model: &'a mut Model<f32>,
    opt: OptimizerState<f32>,
    train: &'a Batch<f32>,
    val: &'a Batch<f32>,
    weights: Vec<f32>,
    counts: Vec<usize>,
}

impl Learner for FullModel<'_> {
    type Snapshot = (ParamStore<f32>, Vec<BnBuffer<f32>>);

    fn step(&mut self, rows: &[usize], dropout: &mut ChaCha8Rng) -> Result<f64> {
        let batch = self.train.gather(rows);
        let mut g = Graph::new();
        let x = g.input(batch.inputs);
        let f = self.model.forward_graph(&mut g, x, Some(dropout))?;
        let loss = g.weighted_cross_entropy(f.scores, &batch.labels, &self.weights)?;
        let value = f64::from(g.value(loss).data()[0]);
        if !value.is_finite() {
            return Ok(value);
        }
        self.model.params.zero_grad();
        g.backward(loss, &mut self.model.params)?;
        self.opt.step(&mut self.model.params)?;
        self.model.update_running_stats(&f.batch_stats);
        Ok(value)
    }

    fn validate(&self) -> Result<(f64, f64)> {
        let scores = self.model.predict_scores(&self.val.inputs)?;
        let loss = balanced_cross_entropy(&scores, &self.val.labels, &self.counts)?;
        let bacc = balanced_accuracy(&argmax_rows(&scores)?, &self.val.labels, self.model.n_classes())?;
        Ok((loss, bacc))
    }

    fn snapshot(&self) -> Self::Snapshot {
        (self.model.params.clone(), self.model.buffers.clone())
    }

    fn restore(&mut self, (params, buffers): Self::Snapshot) {
        self.model.params = params;
        self.model.buffers = buffers;
    }
}

/// Trains every parameter of `model` on `train`, early-stopping on the
/// balanced validation loss. Class weights come from `train` only and are
/// reused for the validation loss. Returns with the best-epoch weights loaded
/// and the model in eval mode.
pub fn fit(model: &mut Model<f32>, train: &Batch<f32>, val: &Batch<f32>, cfg: &TrainConfig) -> Result<TrainReport> {
    check_split(train, "training")?;
    check_split(val, "validation")?;
    let counts = count_classes(&train.labels, model.n_classes())?;
    let weights = class_weights(&counts)?.into_iter().map(|w| w as f32).collect();
    let ids: Vec<ParamId> = model.params.ids().collect();
    let opt = OptimizerState::new(cfg.adamw(), &model.params, &ids)?;
    model.set_mode(Mode::Train);
    let subjects = train.subjects.clone();
    let n = train.len();
    let mut learner = FullModel { model, opt, train, val, weights, counts };
    let report = run_loop(&mut learner, n, &subjects, cfg);
    learner.model.set_mode(Mode::Eval);
    report
}

/// Head-only training on precomputed representations.
struct HeadOnly<'a> {
    params: &'a mut ParamStore<f32>,
    head: (ParamId, ParamId),
    opt: OptimizerState<f32>,
    train_x: &'a Tensor<f32>,
    train_y: &'a [usize],
    val_x: &'a Tensor<f32>,
    val_y: &'a [usize],
    weights: Vec<f32>,
    counts: Vec<usize>,
    n_classes: usize,
}

impl Learner for HeadOnly<'_> {
    type Snapshot = (Tensor<f32>, Tensor<f32>);

    fn step(&mut self, rows: &[usize], _dropout: &mut ChaCha8Rng) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(self.train_x.gather_rows(rows));
        let labels: Vec<usize> = rows.iter().map(|&r| self.train_y[r]).collect();
        let (w, b) = (g.param(self.params, self.head.0), g.param(self.params, self.head.1));
        let s = g.linear(x, w, b)?;
        let loss = g.weighted_cross_entropy(s, &labels, &self.weights)?;
        let value = f64::from(g.value(loss).data()[0]);
        if !value.is_finite() {
            return Ok(value);
        }
        self.params.zero_grad();
        g.backward(loss, self.params)?;
        self.opt.step(self.params)?;
        Ok(value)
    }

    fn validate(&self) -> Result<(f64, f64)> {
        let scores = crate::models::head_forward(self.params, self.head, self.val_x)?;
        let loss = balanced_cross_entropy(&scores, self.val_y, &self.counts)?;
        let bacc = balanced_accuracy(&argmax_rows(&scores)?, self.val_y, self.n_classes)?;
        Ok((loss, bacc))
    }

    fn snapshot(&self) -> Self::Snapshot {
        (self.params.get(self.head.0).value.clone(), self.params.get(self.head.1).value.clone())
    }

    fn restore(&mut self, (w, b): Self::Snapshot) {
        self.params.get_mut(self.head.0).value = w;
        self.params.get_mut(self.head.1).value = b;
    }
}

/// Representations plus labels and subjects for head-only training.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    pub subjects: Vec<String>,
}

/// Trains only the head of `model` on fixed representations with the same
/// optimizer and early-stopping regime as [`fit`]. No representer parameter or
/// buffer is touched.
pub fn fit_head(model: &mut Model<f32>, train: &Features, val: &Features, cfg: &TrainConfig) -> Result<TrainReport> {
    if train.labels.is_empty() || val.labels.is_empty() {
        bail!(EmptySplit, "empty split for head training");
    }
    for f in [train, val] {
        if f.x.shape() != [f.labels.len(), model.repr_dim()] {
            bail!(Shape, "features {:?} do not match {} rows of dimension {}", f.x.shape(), f.labels.len(), model.repr_dim());
        }
    }
    let n_classes = model.n_classes();
    let counts = count_classes(&train.labels, n_classes)?;
    let weights = class_weights(&counts)?.into_iter().map(|w| w as f32).collect();
    let [w, b] = model.head_ids();
    let opt = OptimizerState::new(cfg.adamw(), &model.params, &[w, b])?;
    let mut learner = HeadOnly {
        params: &mut model.params,
        head: (w, b),
        opt,
        train_x: &train.x,
        train_y: &train.labels,
        val_x: &val.x,
        val_y: &val.labels,
        weights,
        counts,
        n_classes,
    };
    run_loop(&mut learner, train.labels.len(), &train.subjects, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub balanced_accuracy: f64,
    pub recalls: Vec<f64>,
    pub predictions: Vec<usize>,
    /// Balanced accuracy per test subject, over the classes that subject has.
    pub per_subject: BTreeMap<String, f64>,
}

/// Scores an already computed set of predictions.
pub fn score_predictions(predictions: Vec<usize>, labels: &[usize], subjects: &[String], n_classes: usize) -> Result<Evaluation> {
    let recalls = per_class_recalls(&predictions, labels, n_classes)?;
    let mut groups: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for ((p, y), s) in predictions.iter().zip(labels).zip(subjects) {
        let e = groups.entry(s.as_str()).or_default();
        e.0.push(*p);
        e.1.push(*y);
    }
    let mut per_subject = BTreeMap::new();
    for (s, (p, y)) in groups {
        let counts = count_classes(&y, n_classes)?;
        let present: Vec<usize> = (0..n_classes).filter(|&k| counts[k] > 0).collect();
        let acc = present
            .iter()
            .map(|&k| p.iter().zip(&y).filter(|(p, y)| **y == k && **p == k).count() as f64 / counts[k] as f64)
            .sum::<f64>()
            / present.len() as f64;
        per_subject.insert(String::from(s), acc);
    }
    Ok(Evaluation { balanced_accuracy: recalls.iter().sum::<f64>() / n_classes as f64, recalls, predictions, per_subject })
}

/// Eval-mode balanced accuracy of `model` on `test`.
pub fn evaluate<T: Scalar>(model: &Model<T>, test: &Batch<T>) -> Result<Evaluation> {
    check_split(test, "test")?;
    if model.mode != Mode::Eval {
        bail!(InvalidArgument, "evaluate needs a model in eval mode");
    }
    let scores = model.predict_scores(&test.inputs)?;
    if !scores.is_finite() {
        return Err(Error::Divergence(format!("non-finite scores for {} test trials", test.len())));
    }
    score_predictions(argmax_rows(&scores)?, &test.labels, &test.subjects, model.n_classes())
}
