use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Result};
use crate::transfer::TransferMatrix;

/// `s = max(a - c, 0) / (a_ref - c)`.
pub fn rescale(a: f64, chance: f64, reference: f64) -> Option<f64> {
    if reference.partial_cmp(&chance) != Some(core::cmp::Ordering::Greater) || !a.is_finite() {
        return None;
    }
    Some((a - chance).max(0.0) / (reference - chance))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferabilityScores {
    pub tasks: Vec<String>,
    /// `values[s][t]`; `None` in every column whose reference is at or below chance.
    pub values: Vec<Vec<Option<f64>>>,
    /// Targets whose reference accuracy does not beat chance.
    pub undefined: Vec<String>,
    /// sha256 of the fold-mean accuracies and chance levels the scores came from.
    pub source_digest: String,
}

impl TransferabilityScores {
    pub fn get(&self, s: usize, t: usize) -> Option<f64> {
        self.values[s][t]
    }

    pub fn is_defined(&self, t: usize) -> bool {
        !self.undefined.contains(&self.tasks[t])
    }

    /// Rows restricted to defined columns.
    pub fn defined_rows(&self) -> Vec<Vec<f64>> {
        let cols: Vec<usize> = (0..self.tasks.len()).filter(|&t| self.is_defined(t)).collect();
        self.values.iter().map(|r| cols.iter().map(|&t| r[t].expect("defined column")).collect()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("source");
        for t in &self.tasks {
            out.push(',');
            out.push_str(t);
        }
        out.push('\n');
        for (s, row) in self.values.iter().enumerate() {
            out.push_str(&self.tasks[s]);
            for v in row {
                match v {
                    Some(v) => out.push_str(&format!(",{v:.6}")),
                    None => out.push_str(",NA"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn matrix_digest(m: &TransferMatrix) -> String {
    let mut h = Sha256::new();
    for (t, c) in m.tasks.iter().zip(&m.chance) {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
        h.update(c.to_bits().to_le_bytes());
    }
    for row in &m.cells {
        for c in row {
            h.update(c.mean.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Rescales fold-mean accuracies so chance maps to 0 and the target's own
/// reference maps to 1. Columns whose reference does not beat chance are
/// reported in `undefined` and hold `None`.
pub fn rescale_scores(m: &TransferMatrix) -> Result<TransferabilityScores> {
    m.validate()?;
    let n = m.tasks.len();
    let mut undefined = Vec::new();
    let mut values = alloc::vec![alloc::vec![None; n]; n];
    for t in 0..n {
        let reference = m.cells[t][t].mean;
        if reference.partial_cmp(&m.chance[t]) != Some(core::cmp::Ordering::Greater) {
            undefined.push(m.tasks[t].clone());
            continue;
        }
        for (s, row) in values.iter_mut().enumerate() {
            let a = m.cells[s][t].mean;
            if !a.is_finite() {
                bail!(InvalidArgument, "non-finite accuracy for {} -> {}", m.tasks[s], m.tasks[t]);
            }
            row[t] = rescale(a, m.chance[t], reference);
        }
    }
    Ok(TransferabilityScores { tasks: m.tasks.clone(), values, undefined, source_digest: matrix_digest(m) })
}
