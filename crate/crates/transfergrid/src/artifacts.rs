//! Per-architecture run outputs derived from a transfer matrix.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use transfergrid_core::analysis::{emit_transfer_graph, rescale_scores, upgma_cluster, Dendrogram, StatTestResult, TransferabilityScores};
use transfergrid_core::seed;
use transfergrid_core::transfer::TransferMatrix;

use crate::error::Result;
use crate::fsutil::{write_atomic, write_json};

pub const MATRIX_CSV: &str = "matrix.csv";
pub const MATRIX_JSON: &str = "matrix.json";
pub const SCORES_CSV: &str = "scores.csv";
pub const GRAPH_DOT: &str = "graph.dot";
pub const DENDROGRAM_JSON: &str = "dendrogram.json";
pub const STATS_JSON: &str = "stats.json";

/// Output files compared by reruns.
pub const DETERMINISTIC_OUTPUTS: [&str; 5] = [MATRIX_CSV, SCORES_CSV, GRAPH_DOT, DENDROGRAM_JSON, STATS_JSON];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DendrogramFile {
    pub labels: Vec<String>,
    pub merges: Vec<transfergrid_core::analysis::Merge>,
    pub newick: String,
    /// Target columns left out of the distance computation (reference at or below chance).
    pub excluded_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub arch: String,
    /// "subject": per-test-subject balanced accuracies are the paired unit.
    pub pairing: String,
    pub permutations: usize,
    pub seed: u64,
    pub comparisons: Vec<StatTestResult>,
}

pub struct Analysis {
    pub scores: TransferabilityScores,
    pub graph: String,
    pub dendrogram: DendrogramFile,
    pub stats: StatsFile,
}

pub fn dendrogram_file(scores: &TransferabilityScores) -> Result<DendrogramFile> {
    let d = if scores.tasks.len() < 2 { Dendrogram { labels: scores.tasks.clone(), merges: Vec::new() } } else { upgma_cluster(scores)? };
    let newick = d.to_newick();
    let merges = d.merges;
    Ok(DendrogramFile { labels: scores.tasks.clone(), merges, newick, excluded_columns: scores.undefined.clone() })
}

/// Paired per-subject pairs of two subject-to-accuracy maps, in subject order.
pub fn pair_subjects(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> (Vec<f64>, Vec<f64>) {
    a.iter().filter_map(|(s, x)| b.get(s).map(|y| (*x, *y))).unzip()
}

/// For each source, probes into every other target against the target's own
/// reference; Bonferroni across sources.
pub fn transfer_stats(m: &TransferMatrix, permutations: usize, master: u64) -> Result<StatsFile> {
    let mut comparisons = Vec::new();
    for (si, source) in m.tasks.iter().enumerate() {
        let mut paired = BTreeMap::new();
        for (ti, target) in m.tasks.iter().enumerate() {
            if ti == si {
                continue;
            }
            let (x, y) = pair_subjects(&m.cells[si][ti].subject_accuracies(), &m.cells[ti][ti].subject_accuracies());
            if x.len() >= 2 {
                paired.insert(target.clone(), (x, y));
            }
        }
        if paired.is_empty() {
            continue;
        }
        let s = seed::derive(master, &[b"stats", source.as_bytes()]);
        comparisons.push(StatTestResult::compare(&format!("{source} representer"), "target reference", &paired, permutations, s)?);
    }
    StatTestResult::adjust_family(&mut comparisons)?;
    Ok(StatsFile { arch: m.arch.name().into(), pairing: "subject".into(), permutations, seed: master, comparisons })
}

pub fn analyze(m: &TransferMatrix, threshold: f64, permutations: usize, master: u64) -> Result<Analysis> {
    m.validate()?;
    let scores = rescale_scores(m)?;
    let graph = emit_transfer_graph(&scores, threshold)?;
    let dendrogram = dendrogram_file(&scores)?;
    let stats = transfer_stats(m, permutations, master)?;
    Ok(Analysis { scores, graph, dendrogram, stats })
}

/// Writes the matrix and every derived artifact into `dir`.
pub fn write_outputs(dir: &Path, m: &TransferMatrix, a: &Analysis) -> Result<()> {
    write_atomic(&dir.join(MATRIX_CSV), m.to_csv().as_bytes())?;
    write_json(&dir.join(MATRIX_JSON), m)?;
    write_atomic(&dir.join(SCORES_CSV), a.scores.to_csv().as_bytes())?;
    write_atomic(&dir.join(GRAPH_DOT), a.graph.as_bytes())?;
    write_json(&dir.join(DENDROGRAM_JSON), &a.dendrogram)?;
    write_json(&dir.join(STATS_JSON), &a.stats)
}
