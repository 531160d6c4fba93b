//! Subject-aligned cross-validation splits.
//!
//! Subjects are shuffled once with a seeded generator and cut into `k`
//! contiguous test blocks (`floor(n / k)` subjects each, the remainder going one
//! per fold to the first folds). For fold `f`, validation subjects are the
//! subjects that follow the test block in the shuffled cyclic order; everyone
//! else trains. The validation size targets 30% of the non-test subjects
//! (24% of the cohort at `k = 5`), shifted by half the test block's rounding
//! error so that train, validation and test all stay within one subject of
//! 56% / 24% / 20%. The same plan is applied verbatim to every
//! task, so a subject never crosses from test to training through transfer.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::seed;

/// Validation share of the non-test subjects (24 / 80).
pub const VAL_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedSplitPlan {
    pub folds: Vec<FoldSplit>,
    pub subjects: Vec<String>,
    pub seed: u64,
}

pub fn make_aligned_splits(subjects: &[String], k: usize, seed: u64) -> Result<AlignedSplitPlan> {
    if k < 2 {
        bail!(InvalidArgument, "need at least 2 folds, got {k}");
    }
    let unique: BTreeSet<&String> = subjects.iter().collect();
    if unique.len() != subjects.len() {
        bail!(InvalidArgument, "subject list contains duplicates");
    }
    let n = subjects.len();
    if n < k {
        bail!(InvalidArgument, "{n} subjects cannot fill {k} non-empty test folds");
    }
    let mut order: Vec<String> = subjects.to_vec();
    order.shuffle(&mut seed::derived_rng(seed, &[b"split"]));

    let base = n / k;
    let extra = n % k;
    let sizes: Vec<usize> = (0..k).map(|f| base + usize::from(f < extra)).collect();
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for &test_size in &sizes {
        let rest = n - test_size;
        if rest < 2 {
            bail!(InvalidArgument, "{n} subjects leave no room for train and validation subjects with {k} folds");
        }
        let nominal_rest = n as f64 * (1.0 - 1.0 / k as f64);
        let target = VAL_FRACTION * nominal_rest + (rest as f64 - nominal_rest) / 2.0;
        let val_size = (libm::round(target).max(0.0) as usize).clamp(1, rest - 1);
        let at = |i: usize| order[(start + i) % n].clone();
        let test: Vec<String> = (0..test_size).map(at).collect();
        let val: Vec<String> = (test_size..test_size + val_size).map(at).collect();
        let train: Vec<String> = (test_size + val_size..n).map(at).collect();
        folds.push(FoldSplit { train_subjects: train, val_subjects: val, test_subjects: test });
        start += test_size;
    }
    Ok(AlignedSplitPlan { folds, subjects: subjects.to_vec(), seed })
}

impl AlignedSplitPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Re-checks the plan's invariants (used when a plan is loaded from disk).
    pub fn validate(&self) -> Result<()> {
        let all: BTreeSet<&String> = self.subjects.iter().collect();
        let mut tested = BTreeSet::new();
        for (f, fold) in self.folds.iter().enumerate() {
            let tr: BTreeSet<&String> = fold.train_subjects.iter().collect();
            let va: BTreeSet<&String> = fold.val_subjects.iter().collect();
            let te: BTreeSet<&String> = fold.test_subjects.iter().collect();
            if !tr.is_disjoint(&va) || !tr.is_disjoint(&te) || !va.is_disjoint(&te) {
                bail!(Leakage, "fold {f}: train/val/test subject sets overlap");
            }
            let union: BTreeSet<&String> = tr.union(&va).copied().chain(te.iter().copied()).collect();
            if union != all {
                bail!(InvalidArgument, "fold {f}: splits do not cover the subject list exactly");
            }
            for s in &fold.test_subjects {
                if !tested.insert(s) {
                    bail!(Leakage, "subject {s} is a test subject in more than one fold");
                }
            }
        }
        if tested.len() != all.len() {
            bail!(InvalidArgument, "test folds do not partition the subject list");
        }
        Ok(())
    }
}
