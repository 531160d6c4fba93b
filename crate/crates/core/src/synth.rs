//! Synthetic multi-task EEG-like cohorts with planted discriminative structure.
//!
//! Each class of a task is a signed sum of components drawn from a shared pool.
//! A component is a Gaussian-windowed sinusoid projected through a unit-norm
//! spatial pattern. Subjects scale each component by a gain and shift it by a
//! latency offset (both fixed per subject and component, shared across tasks),
//! and every trial gets independent pink noise at the task's SNR. The SNR is the
//! mean squared class template (nominal gains, no jitter) averaged over classes,
//! divided by the noise mean square; noise power is identical for every trial so
//! it carries no class information.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{TaskDataset, TrialRecording};
use crate::error::{bail, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub center_ms: f64,
    pub width_ms: f64,
    pub frequency_hz: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub id: String,
    pub waveform: Waveform,
    /// Unit-norm channel mixing vector, one entry per channel.
    pub spatial_pattern: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRef {
    pub component: String,
    /// +1 or -1.
    pub polarity: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGenSpec {
    pub task_id: String,
    pub label_space: Vec<String>,
    /// Class name to the signed components that make up its template.
    pub classes: BTreeMap<String, Vec<ComponentRef>>,
    pub noise_snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectVariability {
    pub gain_std: f64,
    pub latency_jitter_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub m: usize,
    pub c: usize,
    pub sampling_rate: f64,
    pub components: Vec<ComponentSpec>,
    pub tasks: Vec<TaskGenSpec>,
    pub subject_variability: SubjectVariability,
}

/// `amplitude * exp(-(t - center)^2 / (2 width^2)) * sin(2 pi f t + phase)` on
/// `m` samples starting at t = 0 ms. The phase is pi/2 when `f = 0` so that a
/// zero-frequency component is the Gaussian bump itself rather than zero.
pub fn component_waveform(w: &Waveform, m: usize, sampling_rate: f64) -> Result<Vec<f64>> {
    if !(w.width_ms > 0.0) {
        bail!(InvalidArgument, "component width must be positive, got {}", w.width_ms);
    }
    if !(sampling_rate > 0.0) {
        bail!(InvalidArgument, "sampling rate must be positive");
    }
    let phase = if w.frequency_hz == 0.0 { core::f64::consts::FRAC_PI_2 } else { 0.0 };
    Ok((0..m)
        .map(|i| {
            let t_ms = i as f64 * 1000.0 / sampling_rate;
            let d = t_ms - w.center_ms;
            let env = libm::exp(-d * d / (2.0 * w.width_ms * w.width_ms));
            w.amplitude * env * libm::sin(2.0 * core::f64::consts::PI * w.frequency_hz * t_ms / 1000.0 + phase)
        })
        .collect())
}

/// Pink (1/f) noise: white Gaussian noise through Kellet's three-pole filter,
/// after a burn-in so the filter state is stationary.
fn pink_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    const BURN_IN: usize = 1024;
    let (mut b0, mut b1, mut b2) = (0.0f64, 0.0f64, 0.0f64);
    let mut out = Vec::with_capacity(n);
    for i in 0..BURN_IN + n {
        let white: f64 = StandardNormal.sample(rng);
        b0 = 0.99765 * b0 + white * 0.099_046_0;
        b1 = 0.96300 * b1 + white * 0.296_516_4;
        b2 = 0.57000 * b2 + white * 1.052_691_3;
        if i >= BURN_IN {
            out.push(b0 + b1 + b2 + white * 0.1848);
        }
    }
    out
}

impl CohortSpec {
    pub fn subject_ids(&self) -> Vec<String> {
        let width = format!("{}", self.n_subjects).len().max(3);
        (1..=self.n_subjects).map(|i| format!("sub-{i:0width$}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.m == 0 || self.c == 0 || !(self.sampling_rate > 0.0) {
            bail!(InvalidArgument, "cohort needs subjects, a non-empty trial shape and a positive sampling rate");
        }
        let v = &self.subject_variability;
        if !(v.gain_std >= 0.0) || !(v.latency_jitter_ms >= 0.0) {
            bail!(InvalidArgument, "subject variability must be non-negative");
        }
        let mut ids = BTreeSet::new();
        for comp in &self.components {
            if !ids.insert(comp.id.as_str()) {
                bail!(InvalidArgument, "duplicate component id {}", comp.id);
            }
            if comp.spatial_pattern.len() != self.c {
                bail!(Shape, "component {} has {} spatial weights for {} channels", comp.id, comp.spatial_pattern.len(), self.c);
            }
            let norm = libm::sqrt(comp.spatial_pattern.iter().map(|v| v * v).sum::<f64>());
            if (norm - 1.0).abs() > 1e-6 {
                bail!(InvalidArgument, "component {} spatial pattern has norm {norm}, expected 1", comp.id);
            }
            if !(comp.waveform.width_ms > 0.0) {
                bail!(InvalidArgument, "component {} has non-positive width", comp.id);
            }
        }
        let mut task_ids = BTreeSet::new();
        for task in &self.tasks {
            if !task_ids.insert(task.task_id.as_str()) {
                bail!(InvalidArgument, "duplicate task id {}", task.task_id);
            }
            let names: BTreeSet<&String> = task.label_space.iter().collect();
            if names.len() != task.label_space.len() || names.len() != task.classes.len() || task.classes.keys().any(|k| !names.contains(k)) {
                bail!(InvalidArgument, "task {}: classes must match the label space exactly", task.task_id);
            }
            if !task.noise_snr_db.is_finite() {
                bail!(InvalidArgument, "task {}: SNR must be finite", task.task_id);
            }
            let mut templates = BTreeSet::new();
            for (class, refs) in &task.classes {
                if refs.is_empty() {
                    bail!(InvalidArgument, "task {} class {class} references no component", task.task_id);
                }
                for r in refs {
                    if !ids.contains(r.component.as_str()) {
                        bail!(InvalidArgument, "task {} class {class} references unknown component {}", task.task_id, r.component);
                    }
                    if r.polarity != 1 && r.polarity != -1 {
                        bail!(InvalidArgument, "task {} class {class}: polarity must be +1 or -1", task.task_id);
                    }
                }
                let mut key: Vec<(&str, i8)> = refs.iter().map(|r| (r.component.as_str(), r.polarity)).collect();
                key.sort();
                if !templates.insert(key) {
                    bail!(InvalidArgument, "task {}: two classes share the same signed components", task.task_id);
                }
            }
        }
        Ok(())
    }

    fn component(&self, id: &str) -> &ComponentSpec {
        self.components.iter().find(|c| c.id == id).expect("validated reference")
    }

    /// Class template on `m x c` (time-major) for given per-component gains and
    /// latency shifts.
    fn template(&self, refs: &[ComponentRef], gain: &dyn Fn(&str) -> f64, shift_ms: &dyn Fn(&str) -> f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.m * self.c];
        for r in refs {
            let comp = self.component(&r.component);
            let mut w = comp.waveform.clone();
            w.center_ms += shift_ms(&comp.id);
            let wave = component_waveform(&w, self.m, self.sampling_rate)?;
            let k = f64::from(r.polarity) * gain(&comp.id);
            for (t, &a) in wave.iter().enumerate() {
                for (ch, &p) in comp.spatial_pattern.iter().enumerate() {
                    out[t * self.c + ch] += k * a * p;
                }
            }
        }
        Ok(out)
    }

    /// Mean squared nominal signal of `task`, averaged over its classes.
    pub fn signal_power(&self, task: &TaskGenSpec) -> Result<f64> {
        let mut total = 0.0;
        for refs in task.classes.values() {
            let t = self.template(refs, &|_| 1.0, &|_| 0.0)?;
            total += t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        }
        Ok(total / task.classes.len() as f64)
    }
}

/// Generates every task of the cohort. Subjects, gains and latencies are shared
/// across tasks; every (task, subject) pair has its own noise stream, so the
/// result does not depend on generation order.
pub fn generate_cohort(spec: &CohortSpec, trials_per_class_per_subject: usize, seed: u64) -> Result<BTreeMap<String, TaskDataset>> {
    if trials_per_class_per_subject == 0 {
        bail!(InvalidArgument, "need at least one trial per class and subject");
    }
    spec.validate()?;
    let subjects = spec.subject_ids();
    let gain_dist = Normal::new(1.0, spec.subject_variability.gain_std)
        .map_err(|e| crate::Error::InvalidArgument(format!("gain distribution: {e}")))?;
    let jitter = spec.subject_variability.latency_jitter_ms;

    // (subject, component) -> (gain, shift)
    let mut variability: Vec<BTreeMap<&str, (f64, f64)>> = Vec::with_capacity(subjects.len());
    for s in &subjects {
        let mut rng = seed::derived_rng(seed, &[b"subject", s.as_bytes()]);
        let mut per = BTreeMap::new();
        for comp in &spec.components {
            let g = gain_dist.sample(&mut rng);
            let shift = if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
            per.insert(comp.id.as_str(), (g, shift));
        }
        variability.push(per);
    }

    let mut out = BTreeMap::new();
    for task in &spec.tasks {
        let noise_power = spec.signal_power(task)? / libm::pow(10.0, task.noise_snr_db / 10.0);
        let mut trials = Vec::with_capacity(subjects.len() * task.label_space.len() * trials_per_class_per_subject);
        for (si, s) in subjects.iter().enumerate() {
            let var = &variability[si];
            let templates: Vec<Vec<f64>> = task
                .label_space
                .iter()
                .map(|cls| spec.template(&task.classes[cls], &|id| var[id].0, &|id| var[id].1))
                .collect::<Result<_>>()?;
            let mut rng = seed::derived_rng(seed, &[b"noise", task.task_id.as_bytes(), s.as_bytes()]);
            for _ in 0..trials_per_class_per_subject {
                for (label, tpl) in templates.iter().enumerate() {
                    let mut noise = vec![0.0; spec.m * spec.c];
                    for ch in 0..spec.c {
                        for (t, v) in pink_noise(spec.m, &mut rng).into_iter().enumerate() {
                            noise[t * spec.c + ch] = v;
                        }
                    }
                    let ms = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
                    let scale = if ms > 0.0 { libm::sqrt(noise_power / ms) } else { 0.0 };
                    let samples = tpl.iter().zip(&noise).map(|(a, n)| (a + scale * n) as f32).collect();
                    trials.push(TrialRecording { samples, label, subject: s.clone(), task: task.task_id.clone() });
                }
            }
        }
        let ds = TaskDataset {
            task_id: task.task_id.clone(),
            label_space: task.label_space.clone(),
            sampling_rate: spec.sampling_rate,
            window: (0.0, spec.m as f64 * 1000.0 / spec.sampling_rate),
            m: spec.m,
            c: spec.c,
            trials,
        };
        ds.validate()?;
        out.insert(task.task_id.clone(), ds);
    }
    Ok(out)
}

/// Builds a unit-norm spatial pattern from raw weights.
pub fn unit_pattern(weights: &[f64]) -> Vec<f64> {
    let norm = libm::sqrt(weights.iter().map(|v| v * v).sum::<f64>());
    weights.iter().map(|v| v / norm).collect()
}
