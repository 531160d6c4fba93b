//! Central finite-difference check of analytic parameter gradients.

use alloc::string::String;

use rand::seq::index::sample;

use super::{Graph, NodeId, ParamStore};
use crate::error::{bail, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients from
/// turning rounding noise into large relative errors.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

const REL_FLOOR: f64 = 1e-6;

fn run<F>(loss: &mut F, store: &ParamStore<f64>) -> Result<(Graph<f64>, NodeId)>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    if g.value(out).len() != 1 || !g.value(out).data()[0].is_finite() {
        bail!(Divergence, "gradient check needs a finite scalar loss");
    }
    Ok((g, out))
}

/// Compares back-propagated gradients of the scalar built by `loss` against
/// central differences with step `h`, on at most `per_param` randomly chosen
/// coordinates of every parameter that requires a gradient.
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    mut loss: F,
    h: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    store.zero_grad();
    let (g, out) = run(&mut loss, store)?;
    g.backward(out, store)?;
    drop(g);

    let mut rng = seed::rng(seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (String::new(), 0), checked: 0 };
    let ids: alloc::vec::Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad).collect();
    for id in ids {
        let len = store.get(id).value.len();
        let picks = sample(&mut rng, len, per_param.min(len));
        for i in picks.iter() {
            let analytic = store.get(id).grad.data()[i];
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let (gp, op) = run(&mut loss, store)?;
            let fp = gp.value(op).data()[0];
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let (gm, om) = run(&mut loss, store)?;
            let fm = gm.value(om).data()[0];
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic, numeric, REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.0.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = (store.get(id).name.clone(), i);
            }
        }
    }
    Ok(report)
}
