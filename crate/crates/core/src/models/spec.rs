use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Shallow,
    Eegnet,
    Inception,
}

impl ArchKind {
    pub const ALL: [ArchKind; 3] = [ArchKind::Shallow, ArchKind::Eegnet, ArchKind::Inception];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Shallow => "shallow",
            ArchKind::Eegnet => "eegnet",
            ArchKind::Inception => "inception",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Default AdamW learning rate for the architecture.
    pub fn learning_rate(self) -> f64 {
        match self {
            ArchKind::Eegnet => 6.25e-4,
            ArchKind::Shallow | ArchKind::Inception => 1e-4,
        }
    }
}

impl core::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Shallow network: temporal conv, spatial conv, square, mean pool, log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShallowParams {
    pub n_filters: usize,
    pub filter_time_length: usize,
    pub pool_time_length: usize,
    pub pool_time_stride: usize,
    pub drop_prob: f64,
}

impl Default for ShallowParams {
    fn default() -> Self {
        Self { n_filters: 40, filter_time_length: 25, pool_time_length: 75, pool_time_stride: 15, drop_prob: 0.5 }
    }
}

/// Compact depthwise/separable network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EegnetParams {
    pub f1: usize,
    pub depth: usize,
    pub f2: usize,
    pub kernel_length: usize,
    pub separable_length: usize,
    pub pool1: usize,
    pub pool2: usize,
    pub drop_prob: f64,
}

impl Default for EegnetParams {
    fn default() -> Self {
        Self { f1: 8, depth: 2, f2: 16, kernel_length: 64, separable_length: 16, pool1: 4, pool2: 8, drop_prob: 0.25 }
    }
}

/// Multi-scale inception network. Branch kernel lengths are fractions of a
/// second, converted to samples with the input's sampling rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InceptionParams {
    pub scales_s: Vec<f64>,
    pub n_filters: usize,
    pub depth: usize,
    pub pool1: usize,
    pub pool2: usize,
    pub drop_prob: f64,
}

impl Default for InceptionParams {
    fn default() -> Self {
        Self { scales_s: alloc::vec![0.25, 0.125, 0.0625], n_filters: 8, depth: 2, pool1: 4, pool2: 2, drop_prob: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArchParams {
    Shallow(ShallowParams),
    Eegnet(EegnetParams),
    Inception(InceptionParams),
}

impl ArchParams {
    pub fn default_for(kind: ArchKind) -> Self {
        match kind {
            ArchKind::Shallow => ArchParams::Shallow(ShallowParams::default()),
            ArchKind::Eegnet => ArchParams::Eegnet(EegnetParams::default()),
            ArchKind::Inception => ArchParams::Inception(InceptionParams::default()),
        }
    }

    pub fn kind(&self) -> ArchKind {
        match self {
            ArchParams::Shallow(_) => ArchKind::Shallow,
            ArchParams::Eegnet(_) => ArchKind::Eegnet,
            ArchParams::Inception(_) => ArchKind::Inception,
        }
    }
}

/// Full description of a decoding network for one input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    /// Time steps per trial.
    pub m: usize,
    /// Channels per trial.
    pub c: usize,
    pub n_classes: usize,
    pub sampling_rate: f64,
    pub params: ArchParams,
}

impl ArchitectureSpec {
    pub fn new(kind: ArchKind, m: usize, c: usize, n_classes: usize, sampling_rate: f64) -> Self {
        Self { m, c, n_classes, sampling_rate, params: ArchParams::default_for(kind) }
    }

    pub fn kind(&self) -> ArchKind {
        self.params.kind()
    }

    /// Inception branch kernel lengths in samples for the first block.
    pub fn inception_kernels(&self, p: &InceptionParams) -> Vec<usize> {
        p.scales_s.iter().map(|s| (libm::round(s * self.sampling_rate) as usize).max(1)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.c == 0 {
            bail!(InvalidArgument, "input shape must be at least 1x1");
        }
        if self.n_classes < 2 {
            bail!(InvalidArgument, "need at least 2 classes, got {}", self.n_classes);
        }
        let drop = match &self.params {
            ArchParams::Shallow(p) => {
                if p.n_filters == 0 || p.pool_time_stride == 0 {
                    bail!(InvalidArgument, "shallow: filters and pool stride must be >= 1");
                }
                if p.filter_time_length + p.pool_time_length - 1 > self.m || p.filter_time_length == 0 {
                    bail!(
                        Shape,
                        "shallow: temporal kernel {} plus pool {} longer than window of {} samples",
                        p.filter_time_length,
                        p.pool_time_length,
                        self.m
                    );
                }
                p.drop_prob
            }
            ArchParams::Eegnet(p) => {
                if p.f1 == 0 || p.depth == 0 || p.f2 == 0 || p.pool1 == 0 || p.pool2 == 0 {
                    bail!(InvalidArgument, "eegnet: filter counts and pool sizes must be >= 1");
                }
                if p.kernel_length > self.m || p.kernel_length == 0 {
                    bail!(Shape, "eegnet: kernel length {} longer than window of {} samples", p.kernel_length, self.m);
                }
                if self.c == 1 && p.depth > 1 {
                    bail!(InvalidArgument, "eegnet: depthwise depth {} needs more than one channel", p.depth);
                }
                let t = self.m / p.pool1;
                if t == 0 || p.separable_length > t || t / p.pool2 == 0 {
                    bail!(Shape, "eegnet: window of {} samples too short for the pooling stack", self.m);
                }
                p.drop_prob
            }
            ArchParams::Inception(p) => {
                if p.n_filters == 0 || p.depth == 0 || p.pool1 == 0 || p.pool2 == 0 || p.scales_s.is_empty() {
                    bail!(InvalidArgument, "inception: filter counts, pools and scales must be non-empty");
                }
                if self.c == 1 && p.depth > 1 {
                    bail!(InvalidArgument, "inception: depthwise depth {} needs more than one channel", p.depth);
                }
                let ks = self.inception_kernels(p);
                let longest = ks.iter().copied().max().unwrap_or(0);
                if longest > self.m {
                    bail!(Shape, "inception: kernel {} longer than window of {} samples", longest, self.m);
                }
                let t = self.m / p.pool1;
                if t == 0 || t / p.pool2 == 0 || ks.iter().any(|k| (k / p.pool1).max(1) > t) {
                    bail!(Shape, "inception: window of {} samples too short for the pooling stack", self.m);
                }
                p.drop_prob
            }
        };
        if !(0.0..1.0).contains(&drop) {
            bail!(InvalidArgument, "dropout probability {drop} outside [0, 1)");
        }
        Ok(())
    }
}
