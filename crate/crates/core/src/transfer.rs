//! Linear probing and the source x target transfer grid.
//!
//! For every fold and source task a full model is trained on the source
//! task's training subjects; that run is also the diagonal (no-transfer) cell.
//! Its representer is then frozen and a fresh head is trained for every other
//! target task on the same fold's training/validation subjects, and evaluated on
//! the fold's test subjects. The grid is split into independent (fold, source)
//! units so a caller can run them concurrently or resume them.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{chance_level, Batch, TaskDataset};
use crate::error::{bail, Error, Result};
use crate::models::{ArchKind, ArchParams, ArchitectureSpec, Mode, Model};
use crate::seed;
use crate::split::AlignedSplitPlan;
use crate::train::{evaluate, fit, fit_head, Evaluation, Features, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Architecture hyperparameters; the kind is implied.
    pub arch: ArchParams,
    /// `seed` is the master seed; every fit gets a seed derived from it.
    pub train: TrainConfig,
}

impl GridConfig {
    pub fn new(kind: ArchKind, seed: u64) -> Self {
        Self { arch: ArchParams::default_for(kind), train: TrainConfig::for_arch(kind, seed) }
    }

    pub fn kind(&self) -> ArchKind {
        self.arch.kind()
    }

    pub fn master_seed(&self) -> u64 {
        self.train.seed
    }

    /// Architecture for a task of this shape.
    pub fn arch_spec(&self, ds: &TaskDataset) -> ArchitectureSpec {
        let mut spec = ArchitectureSpec::new(self.kind(), ds.m, ds.c, ds.n_classes(), ds.sampling_rate);
        spec.params = self.arch.clone();
        spec
    }
}

fn fold_tag(fold: usize) -> [u8; 8] {
    (fold as u64).to_le_bytes()
}

/// Seed for pre-training `source` in `fold`.
pub fn pretrain_seed(master: u64, fold: usize, source: &str) -> u64 {
    seed::derive(master, &[b"pretrain", &fold_tag(fold), source.as_bytes()])
}

/// Seed for probing `source -> target` in `fold`.
pub fn cell_seed(master: u64, fold: usize, source: &str, target: &str) -> u64 {
    seed::derive(master, &[b"probe", &fold_tag(fold), source.as_bytes(), target.as_bytes()])
}

/// Freezes `model`'s representer, trains a fresh head for the target task and
/// returns the probed model. The representer (parameters and batch-norm
/// statistics) is checked bit for bit after probing.
pub fn linear_probe(
    model: &Model<f32>,
    target_train: &Batch<f32>,
    target_val: &Batch<f32>,
    n_target_classes: usize,
    cfg: &TrainConfig,
) -> Result<(Model<f32>, TrainReport, ProbeFreeze)> {
    for b in [target_train, target_val] {
        let s = b.inputs.shape();
        if s.len() != 4 || s[2] != model.spec.m || s[3] != model.spec.c {
            bail!(Shape, "target trials {:?} do not fit a representer built for {} x {}", s, model.spec.m, model.spec.c);
        }
    }
    let before = model.representer_digest();
    let mut probed = model.clone();
    probed.set_mode(Mode::Eval);
    probed.reset_head(n_target_classes, cfg.seed)?;
    let feats = |b: &Batch<f32>| -> Result<Features> {
        Ok(Features { x: probed.representer_forward(&b.inputs, Mode::Eval, None)?, labels: b.labels.clone(), subjects: b.subjects.clone() })
    };
    let (tr, va) = (feats(target_train)?, feats(target_val)?);
    let report = fit_head(&mut probed, &tr, &va, cfg)?;
    let after = probed.representer_digest();
    if after != before || model.representer_digest() != before {
        return Err(Error::FrozenMutation(format!("representer digest changed during probing: {before} -> {after}")));
    }
    Ok((probed, report, ProbeFreeze { before, after }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeFreeze {
    pub before: String,
    pub after: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Probe,
}

/// Subjects whose trials entered a gradient update in one fit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEntry {
    pub fold: usize,
    pub stage: Stage,
    pub source: String,
    pub target: String,
    pub subjects: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub target: String,
    pub evaluation: Evaluation,
    pub report: TrainReport,
    /// `None` on the diagonal.
    pub freeze: Option<ProbeFreeze>,
}

/// Everything one (fold, source) unit produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitResult {
    pub fold: usize,
    pub source: String,
    pub cells: Vec<CellRun>,
    pub usage: Vec<UsageEntry>,
}

fn check_inputs(tasks: &[TaskDataset], plan: &AlignedSplitPlan) -> Result<()> {
    if tasks.is_empty() {
        bail!(InvalidArgument, "transfer grid needs at least one task");
    }
    plan.validate()?;
    let subjects: BTreeSet<&String> = plan.subjects.iter().collect();
    let first = &tasks[0];
    let mut ids = BTreeSet::new();
    for t in tasks {
        t.validate()?;
        if !ids.insert(t.task_id.as_str()) {
            bail!(Dataset, "task {} appears twice", t.task_id);
        }
        if (t.m, t.c) != (first.m, first.c) || t.sampling_rate != first.sampling_rate {
            bail!(Shape, "task {} has shape {}x{} at {} Hz, task {} has {}x{} at {} Hz", t.task_id, t.m, t.c, t.sampling_rate, first.task_id, first.m, first.c, first.sampling_rate);
        }
        let own = t.subjects();
        if own.len() != subjects.len() || own.iter().any(|s| !subjects.contains(s)) {
            bail!(Dataset, "task {} subjects do not match the split plan", t.task_id);
        }
    }
    Ok(())
}

struct FoldData {
    train: Batch<f32>,
    val: Batch<f32>,
    test: Batch<f32>,
}

fn fold_data(ds: &TaskDataset, plan: &AlignedSplitPlan, fold: usize) -> Result<FoldData> {
    let f = &plan.folds[fold];
    let b = |s: &[String]| Batch::from_trials(&ds.select(s), ds.m, ds.c);
    Ok(FoldData { train: b(&f.train_subjects)?, val: b(&f.val_subjects)?, test: b(&f.test_subjects)? })
}

fn context(e: Error, fold: usize, source: &str, target: &str) -> Error {
    let tag = format!("cell (fold {fold}, source {source}, target {target})");
    match e {
        Error::Shape(m) => Error::Shape(format!("{tag}: {m}")),
        Error::Dataset(m) => Error::Dataset(format!("{tag}: {m}")),
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{tag}: {m}")),
        Error::EmptySplit(m) => Error::EmptySplit(format!("{tag}: {m}")),
        Error::Divergence(m) => Error::Divergence(format!("{tag}: {m}")),
        Error::FrozenMutation(m) => Error::FrozenMutation(format!("{tag}: {m}")),
        Error::Leakage(m) => Error::Leakage(format!("{tag}: {m}")),
        Error::Graph(m) => Error::Graph(format!("{tag}: {m}")),
    }
}

/// Trains a full model on `src` for `fold` and scores it on the fold's test
/// subjects (the diagonal cell).
pub fn pretrain_source(src: &TaskDataset, plan: &AlignedSplitPlan, cfg: &GridConfig, fold: usize) -> Result<(Model<f32>, CellRun)> {
    let source = src.task_id.as_str();
    let wrap = |e| context(e, fold, source, source);
    if fold >= plan.folds.len() {
        return Err(wrap(Error::InvalidArgument(format!("fold {fold} out of range for {} folds", plan.folds.len()))));
    }
    let seed = pretrain_seed(cfg.master_seed(), fold, source);
    let data = fold_data(src, plan, fold).map_err(wrap)?;
    let mut model = Model::build(&cfg.arch_spec(src), seed).map_err(wrap)?;
    let report = fit(&mut model, &data.train, &data.val, &cfg.train.with_seed(seed)).map_err(wrap)?;
    let evaluation = evaluate(&model, &data.test).map_err(wrap)?;
    Ok((model, CellRun { target: source.into(), evaluation, report, freeze: None }))
}

/// Probes a representer pre-trained on `source` on task `tgt` for `fold`.
pub fn probe_target(
    model: &Model<f32>,
    source: &str,
    tgt: &TaskDataset,
    plan: &AlignedSplitPlan,
    cfg: &GridConfig,
    fold: usize,
) -> Result<CellRun> {
    let target = tgt.task_id.as_str();
    let wrap = |e| context(e, fold, source, target);
    if fold >= plan.folds.len() {
        return Err(wrap(Error::InvalidArgument(format!("fold {fold} out of range for {} folds", plan.folds.len()))));
    }
    let data = fold_data(tgt, plan, fold).map_err(wrap)?;
    let probe_cfg = cfg.train.with_seed(cell_seed(cfg.master_seed(), fold, source, target));
    let (probed, report, freeze) = linear_probe(model, &data.train, &data.val, tgt.n_classes(), &probe_cfg).map_err(wrap)?;
    let evaluation = evaluate(&probed, &data.test).map_err(wrap)?;
    Ok(CellRun { target: target.into(), evaluation, report, freeze: Some(freeze) })
}

/// All (fold, source) units of a grid, in execution order.
pub fn grid_units(tasks: &[TaskDataset], plan: &AlignedSplitPlan) -> Vec<(usize, String)> {
    (0..plan.folds.len()).flat_map(|f| tasks.iter().map(move |t| (f, t.task_id.clone()))).collect()
}

/// Pre-trains `source` for `fold` and probes it on every other task.
pub fn run_unit(tasks: &[TaskDataset], plan: &AlignedSplitPlan, cfg: &GridConfig, fold: usize, source: &str) -> Result<UnitResult> {
    check_inputs(tasks, plan)?;
    if fold >= plan.folds.len() {
        bail!(InvalidArgument, "fold {fold} out of range for {} folds", plan.folds.len());
    }
    let Some(src) = tasks.iter().find(|t| t.task_id == source) else {
        bail!(InvalidArgument, "unknown source task {source}");
    };
    let test_subjects: BTreeSet<&String> = plan.folds[fold].test_subjects.iter().collect();

    let (model, diag) = pretrain_source(src, plan, cfg, fold)?;
    let mut usage = alloc::vec![UsageEntry {
        fold,
        stage: Stage::Pretrain,
        source: source.into(),
        target: source.into(),
        subjects: diag.report.update_subjects.clone(),
    }];
    let mut cells = alloc::vec![diag];

    for tgt in tasks.iter().filter(|t| t.task_id != source) {
        let cell = probe_target(&model, source, tgt, plan, cfg, fold)?;
        usage.push(UsageEntry {
            fold,
            stage: Stage::Probe,
            source: source.into(),
            target: cell.target.clone(),
            subjects: cell.report.update_subjects.clone(),
        });
        cells.push(cell);
    }

    for u in &usage {
        if let Some(s) = u.subjects.iter().find(|s| test_subjects.contains(s)) {
            return Err(context(Error::Leakage(format!("test subject {s} used in a gradient update")), fold, &u.source, &u.target));
        }
    }
    Ok(UnitResult { fold, source: source.into(), cells, usage })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub source: String,
    pub target: String,
    pub reference: bool,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
    /// Per fold, balanced accuracy of each test subject.
    pub per_subject: Vec<BTreeMap<String, f64>>,
}

impl TransferCell {
    pub fn new(source: &str, target: &str, folds: Vec<f64>, per_subject: Vec<BTreeMap<String, f64>>) -> Self {
        let n = folds.len() as f64;
        let mean = folds.iter().sum::<f64>() / n;
        let var = folds.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        Self { source: source.into(), target: target.into(), reference: source == target, fold_accuracies: folds, mean, std: libm::sqrt(var), per_subject }
    }

    /// Test-subject balanced accuracies pooled over folds.
    pub fn subject_accuracies(&self) -> BTreeMap<String, f64> {
        self.per_subject.iter().flat_map(|m| m.iter().map(|(k, v)| (k.clone(), *v))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub arch: ArchKind,
    pub tasks: Vec<String>,
    pub chance: Vec<f64>,
    pub n_folds: usize,
    /// `cells[s][t]`: source row, target column.
    pub cells: Vec<Vec<TransferCell>>,
}

impl TransferMatrix {
    pub fn index(&self, task: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == task)
    }

    pub fn cell(&self, source: &str, target: &str) -> Option<&TransferCell> {
        Some(&self.cells[self.index(source)?][self.index(target)?])
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.cells.iter().map(|r| r.iter().map(|c| c.mean).collect()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tasks.len();
        if self.chance.len() != n || self.cells.len() != n || self.cells.iter().any(|r| r.len() != n) {
            bail!(Shape, "transfer matrix is not square over {n} tasks");
        }
        for (i, row) in self.cells.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                if c.source != self.tasks[i] || c.target != self.tasks[j] || c.reference != (i == j) {
                    bail!(InvalidArgument, "cell ({i}, {j}) is labelled {} -> {}", c.source, c.target);
                }
                if c.fold_accuracies.len() != self.n_folds || c.fold_accuracies.iter().any(|a| !(0.0..=1.0).contains(a)) {
                    bail!(InvalidArgument, "cell {} -> {} has invalid fold accuracies", c.source, c.target);
                }
            }
        }
        Ok(())
    }

    /// Rows are sources, columns targets, each cell `mean±std`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source");
        for t in &self.tasks {
            out.push(',');
            out.push_str(t);
        }
        out.push('\n');
        for row in &self.cells {
            out.push_str(&row[0].source);
            for c in row {
                out.push_str(&format!(",{:.4}±{:.4}", c.mean, c.std));
            }
            out.push('\n');
        }
        out
    }
}

/// Assembles unit results into the matrix.
pub fn assemble(tasks: &[TaskDataset], plan: &AlignedSplitPlan, kind: ArchKind, units: &[UnitResult]) -> Result<TransferMatrix> {
    let names: Vec<String> = tasks.iter().map(|t| t.task_id.clone()).collect();
    let k = plan.folds.len();
    let mut by_key: BTreeMap<(usize, &str), &UnitResult> = BTreeMap::new();
    for u in units {
        if by_key.insert((u.fold, u.source.as_str()), u).is_some() {
            bail!(InvalidArgument, "duplicate unit (fold {}, source {})", u.fold, u.source);
        }
    }
    let mut cells = Vec::with_capacity(names.len());
    for s in &names {
        let mut row = Vec::with_capacity(names.len());
        for t in &names {
            let mut accs = Vec::with_capacity(k);
            let mut subj = Vec::with_capacity(k);
            for f in 0..k {
                let Some(u) = by_key.get(&(f, s.as_str())) else {
                    bail!(InvalidArgument, "missing unit (fold {f}, source {s})");
                };
                let Some(c) = u.cells.iter().find(|c| &c.target == t) else {
                    bail!(InvalidArgument, "unit (fold {f}, source {s}) has no cell for {t}");
                };
                accs.push(c.evaluation.balanced_accuracy);
                subj.push(c.evaluation.per_subject.clone());
            }
            row.push(TransferCell::new(s, t, accs, subj));
        }
        cells.push(row);
    }
    let chance = tasks.iter().map(|t| chance_level(&t.label_space)).collect::<Result<_>>()?;
    let m = TransferMatrix { arch: kind, tasks: names, chance, n_folds: k, cells };
    m.validate()?;
    Ok(m)
}

/// Audits a usage log against the plan: no test subject of a fold may appear in
/// any of that fold's gradient updates.
pub fn audit_usage(plan: &AlignedSplitPlan, usage: &[UsageEntry]) -> Result<usize> {
    let mut checked = 0;
    for u in usage {
        let Some(f) = plan.folds.get(u.fold) else {
            bail!(InvalidArgument, "usage entry for unknown fold {}", u.fold);
        };
        if let Some(s) = f.test_subjects.iter().find(|s| u.subjects.contains(*s)) {
            bail!(Leakage, "fold {} {:?} {} -> {}: test subject {s} used in training", u.fold, u.stage, u.source, u.target);
        }
        checked += 1;
    }
    Ok(checked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub matrix: TransferMatrix,
    pub units: Vec<UnitResult>,
}

impl GridOutcome {
    pub fn usage(&self) -> Vec<UsageEntry> {
        self.units.iter().flat_map(|u| u.usage.iter().cloned()).collect()
    }

    pub fn freeze_checks(&self) -> Vec<(&UnitResult, &CellRun)> {
        self.units.iter().flat_map(|u| u.cells.iter().filter(|c| c.freeze.is_some()).map(move |c| (u, c))).collect()
    }
}

/// Runs every unit sequentially and assembles the matrix.
pub fn run_transfer_grid(tasks: &[TaskDataset], plan: &AlignedSplitPlan, cfg: &GridConfig) -> Result<GridOutcome> {
    check_inputs(tasks, plan)?;
    let units = grid_units(tasks, plan)
        .into_iter()
        .map(|(f, s)| run_unit(tasks, plan, cfg, f, &s))
        .collect::<Result<Vec<_>>>()?;
    let usage: Vec<UsageEntry> = units.iter().flat_map(|u| u.usage.iter().cloned()).collect();
    audit_usage(plan, &usage)?;
    let matrix = assemble(tasks, plan, cfg.kind(), &units)?;
    Ok(GridOutcome { matrix, units })
}

#[cfg(test)]
mod tests;
