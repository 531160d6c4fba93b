//! End-to-end orchestration: inputs, resumable grid runs, reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use transfergrid_core::analysis::StatTestResult;
use transfergrid_core::dataset::TaskDataset;
use transfergrid_core::models::ArchKind;
use transfergrid_core::seed;
use transfergrid_core::split::{make_aligned_splits, AlignedSplitPlan};
use transfergrid_core::synth::{generate_cohort, CohortSpec};
use transfergrid_core::transfer::{assemble, audit_usage, grid_units, run_unit, GridConfig, TransferMatrix, UnitResult};

use crate::artifacts::{self, pair_subjects};
use crate::dataio::{self, MANIFEST_FILE, PAYLOAD_FILE};
use crate::error::{Error, Result};
use crate::fsutil::{file_sha256, read_json, write_json};

pub const RUN_MANIFEST: &str = "manifest.json";
pub const RUN_VERSION: u32 = 1;
pub const UNITS_DIR: &str = "units";
pub const REPORT_JSON: &str = "report.json";
pub const DEFAULT_THRESHOLD: f64 = transfergrid_core::analysis::DEFAULT_THRESHOLD;
pub const DEFAULT_PERMUTATIONS: usize = 10_000;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub data: PathBuf,
    pub archs: Vec<ArchKind>,
    pub folds: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub threshold: f64,
    pub permutations: usize,
    pub jobs: usize,
    /// Use this split plan instead of drawing one from `seed`.
    pub split: Option<PathBuf>,
    pub overrides: TrainOverrides,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.archs.is_empty() {
            return Err(Error::Usage("at least one architecture is required".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Usage("--jobs must be at least 1".into()));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Usage("--threshold must be finite".into()));
        }
        if self.permutations == 0 {
            return Err(Error::Usage("--permutations must be at least 1".into()));
        }
        for &k in &self.archs {
            self.grid_config(k).train.validate()?;
        }
        Ok(())
    }

    pub fn grid_config(&self, kind: ArchKind) -> GridConfig {
        let mut g = GridConfig::new(kind, self.seed);
        let o = &self.overrides;
        if let Some(lr) = o.learning_rate {
            g.train.learning_rate = lr;
        }
        if let Some(e) = o.max_epochs {
            g.train.max_epochs = e;
        }
        if let Some(p) = o.patience {
            g.train.patience = p;
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDigest {
    pub task_id: String,
    pub dir: PathBuf,
    pub manifest_sha256: String,
    pub payload_sha256: String,
}

/// Everything needed to rerun one architecture's grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub arch: String,
    pub seed: u64,
    pub threshold: f64,
    pub permutations: usize,
    pub grid: GridConfig,
    pub plan: AlignedSplitPlan,
    pub datasets: Vec<DatasetDigest>,
}

pub struct Inputs {
    pub tasks: Vec<TaskDataset>,
    pub digests: Vec<DatasetDigest>,
}

/// Loads every dataset under `data` with content digests, ordered by task id.
pub fn load_inputs(data: &Path) -> Result<Inputs> {
    let mut pairs = Vec::new();
    for dir in dataio::dataset_dirs(data)? {
        let ds = dataio::load_dataset(&dir)?;
        let digest = DatasetDigest {
            task_id: ds.task_id.clone(),
            manifest_sha256: file_sha256(&dir.join(MANIFEST_FILE))?,
            payload_sha256: file_sha256(&dir.join(PAYLOAD_FILE))?,
            dir,
        };
        pairs.push((ds, digest));
    }
    pairs.sort_by(|a, b| a.0.task_id.cmp(&b.0.task_id));
    let (tasks, digests) = pairs.into_iter().unzip();
    Ok(Inputs { tasks, digests })
}

/// The subject-aligned plan for `tasks`: subjects sorted, then shuffled by `seed`.
pub fn plan_for(tasks: &[TaskDataset], folds: usize, seed: u64) -> Result<AlignedSplitPlan> {
    let Some(first) = tasks.first() else {
        return Err(Error::Usage("no tasks to split".into()));
    };
    let mut subjects = first.subjects();
    subjects.sort();
    Ok(make_aligned_splits(&subjects, folds, seed)?)
}

fn resolve_plan(cfg: &PipelineConfig, tasks: &[TaskDataset]) -> Result<AlignedSplitPlan> {
    match &cfg.split {
        Some(p) => {
            let plan = dataio::read_plan(p)?;
            if plan.k() != cfg.folds {
                log::warn!("split plan {} has {} folds; --folds {} ignored", p.display(), plan.k(), cfg.folds);
            }
            Ok(plan)
        }
        None => plan_for(tasks, cfg.folds, cfg.seed),
    }
}

fn unit_file(dir: &Path, fold: usize, source_index: usize) -> PathBuf {
    dir.join(UNITS_DIR).join(format!("fold{fold}_task{source_index:02}.json"))
}

#[derive(Serialize)]
struct UnitIndex<'a> {
    completed: Vec<&'a str>,
}

/// Runs (or resumes) every (fold, source) unit with `jobs` workers. Completed
/// units are stored under `dir/units/` as they finish.
pub fn run_units(tasks: &[TaskDataset], plan: &AlignedSplitPlan, grid: &GridConfig, jobs: usize, dir: &Path) -> Result<Vec<UnitResult>> {
    let units = grid_units(tasks, plan);
    let index_of = |s: &str| tasks.iter().position(|t| t.task_id == s).expect("unit source is a task");
    let mut done: Vec<Option<UnitResult>> = vec![None; units.len()];
    for (i, (fold, source)) in units.iter().enumerate() {
        let path = unit_file(dir, *fold, index_of(source));
        if path.is_file() {
            match read_json::<UnitResult>(&path) {
                Ok(u) if u.fold == *fold && &u.source == source => {
                    log::info!("resuming: fold {fold} source {source} already done");
                    done[i] = Some(u);
                }
                _ => log::warn!("{}: unreadable unit checkpoint, recomputing", path.display()),
            }
        }
    }
    let pending: Vec<usize> = (0..units.len()).filter(|&i| done[i].is_none()).collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let results = Mutex::new(done);
    let errors: Mutex<BTreeMap<usize, Error>> = Mutex::new(BTreeMap::new());
    let write_index = |results: &[Option<UnitResult>]| -> Result<()> {
        let names: Vec<String> = units
            .iter()
            .enumerate()
            .filter(|(i, _)| results[*i].is_some())
            .map(|(_, (f, s))| unit_file(Path::new(""), *f, index_of(s)).file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        write_json(&dir.join(UNITS_DIR).join("index.json"), &UnitIndex { completed: names.iter().map(String::as_str).collect() })
    };
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(pending.len()) {
            scope.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    return;
                }
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = pending.get(k) else { return };
                let (fold, source) = &units[i];
                log::info!("unit fold {fold} source {source}: training");
                let outcome = run_unit(tasks, plan, grid, *fold, source).map_err(Error::from).and_then(|u| {
                    write_json(&unit_file(dir, *fold, index_of(source)), &u)?;
                    Ok(u)
                });
                match outcome {
                    Ok(u) => {
                        for c in &u.cells {
                            log::info!("  {} -> {}: balanced accuracy {:.4}", source, c.target, c.evaluation.balanced_accuracy);
                        }
                        let mut r = results.lock().unwrap();
                        r[i] = Some(u);
                        if let Err(e) = write_index(&r) {
                            errors.lock().unwrap().insert(i, e);
                            failed.store(true, Ordering::SeqCst);
                        }
                    }
                    Err(e) => {
                        errors.lock().unwrap().insert(i, e);
                        failed.store(true, Ordering::SeqCst);
                    }
                }
            });
        }
    });
    if let Some((_, e)) = errors.into_inner().unwrap().into_iter().next() {
        return Err(e);
    }
    let r = results.into_inner().unwrap();
    write_index(&r)?;
    Ok(r.into_iter().map(|u| u.expect("every unit ran")).collect())
}

/// Runs one architecture's grid into `dir` and writes every artifact.
pub fn run_manifest(manifest: &RunManifest, tasks: &[TaskDataset], jobs: usize, dir: &Path) -> Result<TransferMatrix> {
    let path = dir.join(RUN_MANIFEST);
    if path.is_file() {
        let existing: RunManifest = read_json(&path)?;
        if existing != *manifest {
            return Err(Error::Usage(format!("{} belongs to a different run; choose another --out", path.display())));
        }
    }
    write_json(&path, manifest)?;
    let units = run_units(tasks, &manifest.plan, &manifest.grid, jobs, dir)?;
    let matrix = assemble(tasks, &manifest.plan, manifest.grid.kind(), &units)?;
    let usage: Vec<_> = units.iter().flat_map(|u| u.usage.iter().cloned()).collect();
    let checked = audit_usage(&manifest.plan, &usage)?;
    let probes = units.iter().flat_map(|u| &u.cells).filter(|c| c.freeze.as_ref().is_some_and(|f| f.before == f.after)).count();
    log::info!("leakage audit: {checked} fits clean; freeze checks: {probes} probes unchanged");
    let analysis = artifacts::analyze(&matrix, manifest.threshold, manifest.permutations, manifest.seed)?;
    artifacts::write_outputs(dir, &matrix, &analysis)?;
    Ok(matrix)
}

fn arch_dir(cfg: &PipelineConfig, kind: ArchKind) -> PathBuf {
    if cfg.archs.len() == 1 {
        cfg.out.clone()
    } else {
        cfg.out.join(kind.name())
    }
}

/// Runs the grid for every requested architecture. With more than one
/// architecture each gets its own subdirectory plus a cross-architecture
/// report in `out`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let inputs = load_inputs(&cfg.data)?;
    let plan = resolve_plan(cfg, &inputs.tasks)?;
    let mut dirs = Vec::new();
    for &kind in &cfg.archs {
        let manifest = RunManifest {
            format_version: RUN_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            arch: kind.name().into(),
            seed: cfg.seed,
            threshold: cfg.threshold,
            permutations: cfg.permutations,
            grid: cfg.grid_config(kind),
            plan: plan.clone(),
            datasets: inputs.digests.clone(),
        };
        let dir = arch_dir(cfg, kind);
        log::info!("{}: {} tasks, {} folds -> {}", kind.name(), inputs.tasks.len(), plan.k(), dir.display());
        run_manifest(&manifest, &inputs.tasks, cfg.jobs, &dir)?;
        dirs.push(dir);
    }
    if dirs.len() > 1 {
        let report = build_report(&dirs, cfg.permutations, cfg.seed)?;
        write_json(&cfg.out.join(REPORT_JSON), &report)?;
    }
    Ok(dirs)
}

/// Reruns the grid described by an existing run manifest into `out`. The
/// datasets must still hash to the recorded digests.
pub fn rerun(manifest_path: &Path, out: &Path, jobs: usize) -> Result<TransferMatrix> {
    let manifest: RunManifest = read_json(manifest_path)?;
    if manifest.format_version != RUN_VERSION {
        return Err(Error::format(manifest_path, format!("run manifest version {} is not supported", manifest.format_version)));
    }
    let mut tasks = Vec::new();
    for d in &manifest.datasets {
        let m = file_sha256(&d.dir.join(MANIFEST_FILE))?;
        let p = file_sha256(&d.dir.join(PAYLOAD_FILE))?;
        if m != d.manifest_sha256 || p != d.payload_sha256 {
            return Err(Error::format(&d.dir, "dataset content differs from the run manifest"));
        }
        tasks.push(dataio::load_dataset(&d.dir)?);
    }
    run_manifest(&manifest, &tasks, jobs.max(1), out)
}

/// Generates a synthetic cohort into `out/<task>/`, echoing the spec.
pub fn synthesize(spec_path: &Path, out: &Path, trials: usize, seed: u64) -> Result<Vec<String>> {
    let spec: CohortSpec = read_json(spec_path)?;
    spec.validate().map_err(|e| Error::format(spec_path, e.to_string()))?;
    let cohort = generate_cohort(&spec, trials, seed)?;
    for (id, ds) in &cohort {
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::format(spec_path, format!("task id {id:?} cannot name a directory")));
        }
        dataio::write_dataset(ds, &out.join(id))?;
    }
    write_json(&out.join("cohort.json"), &spec)?;
    Ok(cohort.into_keys().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<PathBuf>,
    pub archs: Vec<String>,
    /// Diagonal (no-transfer) fold-mean balanced accuracy per architecture and task.
    pub reference: BTreeMap<String, BTreeMap<String, f64>>,
    pub permutations: usize,
    pub seed: u64,
    pub comparisons: Vec<StatTestResult>,
}

/// Pairwise architecture comparisons on the diagonal cells of several runs.
pub fn build_report(runs: &[PathBuf], permutations: usize, seed: u64) -> Result<Report> {
    let matrices: Vec<TransferMatrix> = runs.iter().map(|r| read_json(&r.join(artifacts::MATRIX_JSON))).collect::<Result<_>>()?;
    let mut reference = BTreeMap::new();
    for m in &matrices {
        let diag = m.tasks.iter().enumerate().map(|(i, t)| (t.clone(), m.cells[i][i].mean)).collect();
        reference.insert(m.arch.name().to_string(), diag);
    }
    let mut comparisons = Vec::new();
    for i in 0..matrices.len() {
        for j in i + 1..matrices.len() {
            let (a, b) = (&matrices[i], &matrices[j]);
            let mut paired = BTreeMap::new();
            for (ti, t) in a.tasks.iter().enumerate() {
                let Some(tj) = b.index(t) else { continue };
                let (x, y) = pair_subjects(&a.cells[ti][ti].subject_accuracies(), &b.cells[tj][tj].subject_accuracies());
                if x.len() >= 2 {
                    paired.insert(t.clone(), (x, y));
                }
            }
            if paired.is_empty() {
                log::warn!("{} and {} share no comparable tasks", runs[i].display(), runs[j].display());
                continue;
            }
            let s = seed::derive(seed, &[b"report", a.arch.name().as_bytes(), b.arch.name().as_bytes()]);
            comparisons.push(StatTestResult::compare(a.arch.name(), b.arch.name(), &paired, permutations, s)?);
        }
    }
    StatTestResult::adjust_family(&mut comparisons)?;
    Ok(Report {
        runs: runs.to_vec(),
        archs: matrices.iter().map(|m| m.arch.name().to_string()).collect(),
        reference,
        permutations,
        seed,
        comparisons,
    })
}
