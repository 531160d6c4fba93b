#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use transfergrid::pipeline::{PipelineConfig, TrainOverrides};
use transfergrid_core::dataset::{TaskDataset, TrialRecording};
use transfergrid_core::models::ArchKind;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transfergrid")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

pub fn quick_config(data: &Path, out: &Path) -> PipelineConfig {
    PipelineConfig {
        data: data.to_path_buf(),
        archs: vec![ArchKind::Shallow],
        folds: 4,
        seed: 3,
        out: out.to_path_buf(),
        threshold: 0.05,
        permutations: 200,
        jobs: 1,
        split: None,
        overrides: TrainOverrides { learning_rate: Some(1e-3), max_epochs: Some(4), patience: Some(2) },
    }
}

/// Small synthetic cohort on disk under `dir`.
pub fn tiny_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    transfergrid::pipeline::synthesize(&fixture("tiny_cohort.json"), &data, 6, 1).unwrap();
    data
}

pub fn toy_dataset(n_trials: usize, m: usize, c: usize) -> TaskDataset {
    let trials = (0..n_trials)
        .map(|i| TrialRecording {
            samples: (0..m * c).map(|j| ((i * 31 + j * 7) % 23) as f32 * 0.37 - 4.0).collect(),
            label: i % 2,
            subject: format!("sub-{:02}", i / 4),
            task: "toy".into(),
        })
        .collect();
    TaskDataset {
        task_id: "toy".into(),
        label_space: vec!["zeta".into(), "alpha".into()],
        sampling_rate: 250.0,
        window: (-100.0, 900.0),
        m,
        c,
        trials,
    }
}
