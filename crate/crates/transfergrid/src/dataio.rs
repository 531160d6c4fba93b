//! On-disk dataset format: a directory holding `manifest.json` and
//! `trials.f32` (trials back to back, each `m * c` little-endian f32,
//! time-major).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use transfergrid_core::dataset::{TaskDataset, TrialRecording};
use transfergrid_core::split::AlignedSplitPlan;

use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_atomic, write_json};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "trials.f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialIndex {
    pub subject: String,
    pub label: usize,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub task_id: String,
    pub label_space: Vec<String>,
    pub sampling_rate: f64,
    pub window: (f64, f64),
    pub m: usize,
    pub c: usize,
    pub subjects: Vec<String>,
    pub trials: Vec<TrialIndex>,
}

impl DatasetManifest {
    pub fn trial_bytes(&self) -> u64 {
        4 * (self.m * self.c) as u64
    }

    /// Structural checks against a payload of `payload_len` bytes.
    pub fn check(&self, payload_len: u64, path: &Path) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::format(path, format!("format version {} is not supported (expected {FORMAT_VERSION})", self.format_version)));
        }
        let size = self.trial_bytes();
        if size == 0 {
            return Err(Error::format(path, format!("trial shape {}x{} is empty", self.m, self.c)));
        }
        if self.trials.len() as u64 * size != payload_len {
            return Err(Error::format(
                path,
                format!("payload is {payload_len} bytes but {} trials of {}x{} need {}", self.trials.len(), self.m, self.c, self.trials.len() as u64 * size),
            ));
        }
        let mut prev: Option<u64> = None;
        for (i, t) in self.trials.iter().enumerate() {
            if prev.is_some_and(|p| t.offset < p + size) {
                return Err(Error::format(path, format!("trial {i} offset {} is not past the previous trial", t.offset)));
            }
            if t.offset + size > payload_len {
                return Err(Error::format(path, format!("trial {i} runs past the end of the payload")));
            }
            if !self.subjects.contains(&t.subject) {
                return Err(Error::format(path, format!("trial {i} subject {} missing from the subject list", t.subject)));
            }
            prev = Some(t.offset);
        }
        Ok(())
    }
}

/// Writes `ds` into directory `dir`. Output bytes depend only on `ds`.
pub fn write_dataset(ds: &TaskDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    let size = 4 * ds.m * ds.c;
    let mut payload = Vec::with_capacity(ds.trials.len() * size);
    let mut index = Vec::with_capacity(ds.trials.len());
    for t in &ds.trials {
        index.push(TrialIndex { subject: t.subject.clone(), label: t.label, offset: payload.len() as u64 });
        for v in &t.samples {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        task_id: ds.task_id.clone(),
        label_space: ds.label_space.clone(),
        sampling_rate: ds.sampling_rate,
        window: ds.window,
        m: ds.m,
        c: ds.c,
        subjects: ds.subjects(),
        trials: index,
    };
    write_atomic(&dir.join(PAYLOAD_FILE), &payload)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

/// Reads a dataset directory and checks every invariant.
pub fn load_dataset(dir: &Path) -> Result<TaskDataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let ppath = dir.join(PAYLOAD_FILE);
    let manifest: DatasetManifest = read_json(&mpath)?;
    let payload = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    manifest.check(payload.len() as u64, &mpath)?;
    let size = manifest.trial_bytes() as usize;
    let trials = manifest
        .trials
        .iter()
        .map(|t| {
            let raw = &payload[t.offset as usize..t.offset as usize + size];
            TrialRecording {
                samples: raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
                label: t.label,
                subject: t.subject.clone(),
                task: manifest.task_id.clone(),
            }
        })
        .collect();
    let ds = TaskDataset {
        task_id: manifest.task_id,
        label_space: manifest.label_space,
        sampling_rate: manifest.sampling_rate,
        window: manifest.window,
        m: manifest.m,
        c: manifest.c,
        trials,
    };
    ds.validate().map_err(|e| Error::format(&mpath, e.to_string()))?;
    let used = ds.subjects();
    for s in manifest.subjects.iter().filter(|s| !used.contains(s)) {
        log::warn!("{}: subject {s} has no trials", mpath.display());
    }
    Ok(ds)
}

/// Dataset directories under `root`: `root` itself if it holds a manifest,
/// else every immediate subdirectory that does, sorted by name.
pub fn dataset_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(MANIFEST_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if p.join(MANIFEST_FILE).is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(root, "no dataset directories (with manifest.json) found"));
    }
    Ok(dirs)
}

/// Loads every dataset under `root`, ordered by task id.
pub fn load_datasets(root: &Path) -> Result<Vec<TaskDataset>> {
    let mut out = dataset_dirs(root)?.iter().map(|d| load_dataset(d)).collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    Ok(out)
}

pub fn write_plan(plan: &AlignedSplitPlan, path: &Path) -> Result<()> {
    write_json(path, plan)
}

pub fn read_plan(path: &Path) -> Result<AlignedSplitPlan> {
    let plan: AlignedSplitPlan = read_json(path)?;
    plan.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(plan)
}
