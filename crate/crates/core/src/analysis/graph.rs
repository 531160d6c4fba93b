use alloc::format;
use alloc::string::String;

use super::TransferabilityScores;
use crate::error::{bail, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.05;
/// Edge penwidth per unit of score.
pub const PENWIDTH_SCALE: f64 = 5.0;

fn quote(id: &str) -> String {
    let mut s = String::with_capacity(id.len() + 2);
    s.push('"');
    for ch in id.chars() {
        if ch == '"' || ch == '\\' {
            s.push('\\');
        }
        s.push(ch);
    }
    s.push('"');
    s
}

/// DOT digraph with one node per task and an edge `S -> T` for every defined
/// `s[S][T] > threshold`, `S != T`. Nodes whose column is undefined are kept
/// and drawn dashed. Node and edge order follow the task order.
pub fn emit_transfer_graph(scores: &TransferabilityScores, threshold: f64) -> Result<String> {
    if !threshold.is_finite() {
        bail!(InvalidArgument, "threshold must be finite");
    }
    let n = scores.tasks.len();
    if scores.values.len() != n || scores.values.iter().any(|r| r.len() != n) {
        bail!(Shape, "score matrix is not square over {n} tasks");
    }
    let mut out = String::from("digraph transfer {\n");
    for (t, name) in scores.tasks.iter().enumerate() {
        if scores.is_defined(t) {
            out.push_str(&format!("  {};\n", quote(name)));
        } else {
            out.push_str(&format!("  {} [style=dashed, tooltip=\"reference at or below chance\"];\n", quote(name)));
        }
    }
    for s in 0..n {
        for t in 0..n {
            if s == t {
                continue;
            }
            match scores.values[s][t] {
                Some(v) if !v.is_finite() || v < 0.0 => bail!(InvalidArgument, "invalid score {v} for edge {s} -> {t}"),
                Some(v) if v > threshold => out.push_str(&format!(
                    "  {} -> {} [penwidth={:.4}, weight={:.4}];\n",
                    quote(&scores.tasks[s]),
                    quote(&scores.tasks[t]),
                    PENWIDTH_SCALE * v,
                    v
                )),
                _ => {}
            }
        }
    }
    out.push_str("}\n");
    Ok(out)
}
