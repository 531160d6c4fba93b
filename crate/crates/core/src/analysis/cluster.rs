use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::TransferabilityScores;
use crate::error::{bail, Result};

/// One agglomeration step. Leaves are `0..n`; the cluster created by merge
/// `i` gets id `n + i`. `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub labels: Vec<String>,
    pub merges: Vec<Merge>,
}

fn newick_label(s: &str) -> String {
    if s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.') {
        String::from(s)
    } else {
        format!("'{}'", s.replace('\'', "''"))
    }
}

impl Dendrogram {
    pub fn n_leaves(&self) -> usize {
        self.labels.len()
    }

    fn height_of(&self, id: usize) -> f64 {
        if id < self.n_leaves() {
            0.0
        } else {
            self.merges[id - self.n_leaves()].height
        }
    }

    fn subtree(&self, id: usize, parent_height: f64, out: &mut String) {
        let n = self.n_leaves();
        if id < n {
            out.push_str(&newick_label(&self.labels[id]));
        } else {
            let m = self.merges[id - n];
            out.push('(');
            self.subtree(m.a, m.height, out);
            out.push(',');
            self.subtree(m.b, m.height, out);
            out.push(')');
        }
        out.push_str(&format!(":{:.6}", parent_height - self.height_of(id)));
    }

    /// Newick string with branch lengths equal to height differences.
    pub fn to_newick(&self) -> String {
        let n = self.n_leaves();
        let mut out = String::new();
        match self.merges.last() {
            None if n == 1 => out.push_str(&newick_label(&self.labels[0])),
            None => {}
            Some(root) => {
                out.push('(');
                self.subtree(root.a, root.height, &mut out);
                out.push(',');
                self.subtree(root.b, root.height, &mut out);
                out.push(')');
            }
        }
        out.push(';');
        out
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn check_distances(d: &[Vec<f64>]) -> Result<usize> {
    let n = d.len();
    if n < 2 {
        bail!(InvalidArgument, "clustering needs at least 2 items, got {n}");
    }
    for (i, row) in d.iter().enumerate() {
        if row.len() != n {
            bail!(Shape, "distance matrix is not square");
        }
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() || v < 0.0 || v != d[j][i] {
                bail!(InvalidArgument, "distance ({i}, {j}) = {v} is not a finite symmetric non-negative value");
            }
        }
    }
    Ok(n)
}

/// UPGMA on a precomputed distance matrix: size-weighted average linkage,
/// merge height = half the linkage distance, ties broken toward the
/// lexicographically smallest pair of cluster ids.
#[allow(clippy::needless_range_loop)]
pub fn upgma_from_distances(labels: &[String], d: &[Vec<f64>]) -> Result<Dendrogram> {
    let n = check_distances(d)?;
    if labels.len() != n {
        bail!(Shape, "{} labels for {n} items", labels.len());
    }
    // active clusters: (id, size); dist indexed by position in `active`
    let mut active: Vec<(usize, usize)> = (0..n).map(|i| (i, 1)).collect();
    let mut dist: Vec<Vec<f64>> = d.to_vec();
    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let (mut bi, mut bj, mut best) = (0, 1, f64::INFINITY);
        for i in 0..active.len() {
            for j in i + 1..active.len() {
                if dist[i][j] < best {
                    (bi, bj, best) = (i, j, dist[i][j]);
                }
            }
        }
        let ((ia, na), (ib, nb)) = (active[bi], active[bj]);
        let size = na + nb;
        merges.push(Merge { a: ia.min(ib), b: ia.max(ib), height: best / 2.0, size });
        let new_row: Vec<f64> = (0..active.len()).map(|k| (na as f64 * dist[bi][k] + nb as f64 * dist[bj][k]) / size as f64).collect();
        // drop bj then bi (bj > bi), append the new cluster last: ids stay ascending
        for row in dist.iter_mut() {
            row.push(0.0);
        }
        let m = active.len();
        dist.push(alloc::vec![0.0; m + 1]);
        for k in 0..m {
            dist[m][k] = new_row[k];
            dist[k][m] = new_row[k];
        }
        active.push((n + step, size));
        for idx in [bj, bi] {
            active.remove(idx);
            dist.remove(idx);
            for row in dist.iter_mut() {
                row.remove(idx);
            }
        }
    }
    Ok(Dendrogram { labels: labels.to_vec(), merges })
}

/// Clusters tasks by the Euclidean distance between their score rows,
/// restricted to defined columns.
pub fn upgma_cluster(scores: &TransferabilityScores) -> Result<Dendrogram> {
    let rows = scores.defined_rows();
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        bail!(InvalidArgument, "score rows contain non-finite values");
    }
    let d: Vec<Vec<f64>> = rows.iter().map(|a| rows.iter().map(|b| euclidean(a, b)).collect()).collect();
    upgma_from_distances(&scores.tasks, &d)
}

/// Reference average linkage: every step recomputes each candidate pair's
/// linkage as the plain mean over leaf pairs and scans all pairs.
pub fn exhaustive_average_linkage(labels: &[String], d: &[Vec<f64>]) -> Result<Dendrogram> {
    let n = check_distances(d)?;
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, alloc::vec![i])).collect();
    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for (x, (ida, la)) in clusters.iter().enumerate() {
            for (y, (idb, lb)) in clusters.iter().enumerate() {
                if ida >= idb {
                    continue;
                }
                let link = la.iter().flat_map(|&i| lb.iter().map(move |&j| d[i][j])).sum::<f64>() / (la.len() * lb.len()) as f64;
                let better = match best {
                    None => true,
                    Some((b, bx, by)) => link < b || (link == b && (*ida, *idb) < (clusters[bx].0, clusters[by].0)),
                };
                if better {
                    best = Some((link, x, y));
                }
            }
        }
        let (link, x, y) = best.expect("at least two clusters");
        let (ida, idb) = (clusters[x].0, clusters[y].0);
        let mut leaves = clusters[x].1.clone();
        leaves.extend_from_slice(&clusters[y].1);
        merges.push(Merge { a: ida, b: idb, height: link / 2.0, size: leaves.len() });
        let (hi, lo) = (x.max(y), x.min(y));
        clusters.remove(hi);
        clusters.remove(lo);
        clusters.push((n + step, leaves));
    }
    Ok(Dendrogram { labels: labels.to_vec(), merges })
}
