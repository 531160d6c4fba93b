//! Trial and task data model.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::engine::{Scalar, Tensor};
use crate::error::{bail, Result};

/// One epoched multichannel trial: `m` time steps by `c` channels, stored
/// time-major (`samples[t * c + ch]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecording {
    pub samples: Vec<f32>,
    pub label: usize,
    pub subject: String,
    pub task: String,
}

/// All trials of one cognitive task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: String,
    pub label_space: Vec<String>,
    pub sampling_rate: f64,
    /// Epoch window relative to the event, in milliseconds.
    pub window: (f64, f64),
    pub m: usize,
    pub c: usize,
    pub trials: Vec<TrialRecording>,
}

impl TaskDataset {
    pub fn n_classes(&self) -> usize {
        self.label_space.len()
    }

    /// Checks every structural invariant. `require_coverage` additionally
    /// demands at least one trial of every class (skipped for empty datasets).
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.c == 0 {
            bail!(Dataset, "{}: trial shape must be at least 1x1, got {}x{}", self.task_id, self.m, self.c);
        }
        if !(2..=3).contains(&self.label_space.len()) {
            bail!(Dataset, "{}: label space must have 2 or 3 classes, got {}", self.task_id, self.label_space.len());
        }
        if !(self.sampling_rate > 0.0) {
            bail!(Dataset, "{}: sampling rate must be positive", self.task_id);
        }
        let k = self.label_space.len();
        let mut seen = alloc::vec![false; k];
        for (i, t) in self.trials.iter().enumerate() {
            if t.task != self.task_id {
                bail!(Dataset, "trial {i} belongs to task {} inside dataset {}", t.task, self.task_id);
            }
            if t.samples.len() != self.m * self.c {
                bail!(Dataset, "{}: trial {i} has {} samples, expected {}", self.task_id, t.samples.len(), self.m * self.c);
            }
            if t.label >= k {
                bail!(Dataset, "{}: trial {i} label {} out of range for {k} classes", self.task_id, t.label);
            }
            if let Some(j) = t.samples.iter().position(|v| !v.is_finite()) {
                bail!(Dataset, "{}: trial {i} has a non-finite sample at index {j}", self.task_id);
            }
            seen[t.label] = true;
        }
        if !self.trials.is_empty() {
            if let Some(missing) = seen.iter().position(|s| !s) {
                bail!(Dataset, "{}: class {} has no trials", self.task_id, self.label_space[missing]);
            }
        }
        Ok(())
    }

    /// Subjects in order of first appearance.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for t in &self.trials {
            if seen.insert(t.subject.as_str()) {
                out.push(t.subject.clone());
            }
        }
        out
    }

    /// Trials whose subject is in `subjects`, in dataset order.
    pub fn select<'a>(&'a self, subjects: &[String]) -> Vec<&'a TrialRecording> {
        let set: BTreeSet<&str> = subjects.iter().map(String::as_str).collect();
        self.trials.iter().filter(|t| set.contains(t.subject.as_str())).collect()
    }

    pub fn class_counts(trials: &[&TrialRecording], n_classes: usize) -> Vec<usize> {
        let mut counts = alloc::vec![0; n_classes];
        for t in trials {
            counts[t.label] += 1;
        }
        counts
    }
}

/// A batch of trials laid out as an `n x 1 x m x c` image tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub subjects: Vec<String>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_trials(trials: &[&TrialRecording], m: usize, c: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(trials.len() * m * c);
        for t in trials {
            if t.samples.len() != m * c {
                bail!(Shape, "trial has {} samples, expected {}x{}", t.samples.len(), m, c);
            }
            data.extend(t.samples.iter().map(|&v| T::of(v as f64)));
        }
        Ok(Self {
            inputs: Tensor::from_vec(&[trials.len(), 1, m, c], data)?,
            labels: trials.iter().map(|t| t.label).collect(),
            subjects: trials.iter().map(|t| t.subject.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(&self, rows: &[usize]) -> Self {
        Self {
            inputs: self.inputs.gather_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            subjects: rows.iter().map(|&r| self.subjects[r].clone()).collect(),
        }
    }
}

/// Balanced-accuracy chance level under uniform guessing: `1 / |label_space|`.
pub fn chance_level<S>(label_space: &[S]) -> Result<f64> {
    if label_space.is_empty() {
        bail!(InvalidArgument, "chance level of an empty label space");
    }
    Ok(1.0 / label_space.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn ds(trials: Vec<TrialRecording>) -> TaskDataset {
        TaskDataset {
            task_id: "t".into(),
            label_space: vec!["a".into(), "b".into()],
            sampling_rate: 128.0,
            window: (0.0, 1000.0),
            m: 2,
            c: 2,
            trials,
        }
    }

    fn trial(label: usize, subject: &str) -> TrialRecording {
        TrialRecording { samples: vec![0.5; 4], label, subject: subject.to_string(), task: "t".into() }
    }

    #[test]
    fn chance_levels() {
        assert_eq!(chance_level(&["a", "b"]).unwrap(), 0.5);
        assert_eq!(chance_level(&["a", "b", "c"]).unwrap(), 1.0 / 3.0);
        assert_eq!(chance_level(&["a"]).unwrap(), 1.0);
        assert!(chance_level::<&str>(&[]).is_err());
    }

    #[test]
    fn validation_catches_each_violation() {
        assert!(ds(vec![]).validate().is_ok());
        assert!(ds(vec![trial(0, "s1"), trial(1, "s1")]).validate().is_ok());
        assert!(ds(vec![trial(0, "s1")]).validate().is_err(), "missing class");
        assert!(ds(vec![trial(0, "s1"), trial(2, "s1")]).validate().is_err(), "label range");
        let mut t = trial(1, "s1");
        t.samples[3] = f32::NAN;
        assert!(ds(vec![trial(0, "s1"), t]).validate().is_err(), "non-finite");
        let mut t = trial(1, "s1");
        t.samples.pop();
        assert!(ds(vec![trial(0, "s1"), t]).validate().is_err(), "shape");
        let mut t = trial(1, "s1");
        t.task = "other".into();
        assert!(ds(vec![trial(0, "s1"), t]).validate().is_err(), "task id");
        let mut d = ds(vec![]);
        d.label_space.push("c".into());
        d.label_space.push("d".into());
        assert!(d.validate().is_err(), "four classes");
    }

    #[test]
    fn batch_layout_is_time_major_image() {
        let mut t = trial(1, "s2");
        t.samples = vec![1.0, 2.0, 3.0, 4.0];
        let b: Batch<f32> = Batch::from_trials(&[&t], 2, 2).unwrap();
        assert_eq!(b.inputs.shape(), &[1, 1, 2, 2]);
        assert_eq!(b.inputs.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ds(vec![trial(0, "x"), trial(1, "y"), trial(0, "x")]).subjects(), vec!["x", "y"]);
    }
}
