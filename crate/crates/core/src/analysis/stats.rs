//! Significance battery: paired permutation signed-rank test, Stouffer
//! combination, Bonferroni adjustment and paired standardized mean difference.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::seed;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
}

/// Standard normal quantile (Wichura's AS 241, about 1e-16 relative accuracy).
#[allow(clippy::excessive_precision)] // published coefficients, kept verbatim
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        bail!(InvalidArgument, "normal quantile needs p in (0, 1), got {p}");
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r + 45921.953931549871457) * r
            + 13731.693765509461125)
            * r
            + 1971.5909503065514427)
            * r
            + 133.14166789178437745)
            * r
            + 3.387132872796366608;
        let den = ((((((5226.495278852545925 * r + 28729.085735721942674) * r + 39307.89580009271061) * r + 21213.794301586595867) * r
            + 5394.1960214247511077)
            * r
            + 687.1870074920579083)
            * r
            + 42.313330701600911252)
            * r
            + 1.0;
        return Ok(q * num / den);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = libm::sqrt(-libm::log(r));
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r + 1.27045825245236838258) * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734;
        let den = ((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966) * r + 0.14810397642748007459) * r
            + 0.68976733498510000455)
            * r
            + 1.6763848301838038494)
            * r
            + 2.05319162663775882187)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r + 0.026532189526576123093) * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772;
        let den = ((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5) * r + 7.868691311456132591e-4) * r
            + 0.0148753612908506148525)
            * r
            + 0.13692988092273580531)
            * r
            + 0.59983220655588793769)
            * r
            + 1.0;
        num / den
    };
    Ok(if q < 0.0 { -val } else { val })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedRank {
    pub p_value: f64,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Non-zero differences used.
    pub n_used: usize,
    pub exhaustive: bool,
    /// Every difference was zero; `p_value` is 1.
    pub degenerate: bool,
}

/// Largest count of non-zero differences for which the null distribution is
/// enumerated exactly.
pub const EXHAUSTIVE_MAX: usize = 12;

/// Two-sided paired signed-rank permutation test of `x - y`. Zero
/// differences are dropped and tied magnitudes get midranks. The null flips the
/// sign of each difference; it is enumerated when at most
/// [`EXHAUSTIVE_MAX`] differences remain, otherwise `n_permutations` seeded sign
/// draws give `p = (1 + hits) / (1 + n_permutations)`.
pub fn permutation_signed_rank(x: &[f64], y: &[f64], n_permutations: usize, seed: u64) -> Result<SignedRank> {
    if x.len() != y.len() {
        bail!(Shape, "paired samples of lengths {} and {}", x.len(), y.len());
    }
    if x.len() < 2 {
        bail!(InvalidArgument, "signed-rank test needs at least 2 pairs");
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        bail!(InvalidArgument, "non-finite paired score");
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(SignedRank { p_value: 1.0, w_plus: 0.0, n_used: 0, exhaustive: true, degenerate: true });
    }
    // doubled midranks keep every statistic an exact integer
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut rank2 = alloc::vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        // positions i..=j share rank (i+1 + j+1)/2, doubled
        for &k in &order[i..=j] {
            rank2[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    let total: u64 = rank2.iter().sum();
    // |2 W+ - total/2| doubled again: |4 W+ - total| in units of the doubled ranks
    let stat = |w2: u64| (2 * w2).abs_diff(total);
    let w2_obs: u64 = rank2.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let t_obs = stat(w2_obs);
    let w_plus = w2_obs as f64 / 2.0;

    if n <= EXHAUSTIVE_MAX {
        let mut hits = 0u64;
        for mask in 0u32..(1 << n) {
            let w2: u64 = (0..n).filter(|b| mask >> b & 1 == 1).map(|b| rank2[b]).sum();
            if stat(w2) >= t_obs {
                hits += 1;
            }
        }
        return Ok(SignedRank { p_value: hits as f64 / (1u64 << n) as f64, w_plus, n_used: n, exhaustive: true, degenerate: false });
    }
    if n_permutations == 0 {
        bail!(InvalidArgument, "Monte Carlo signed-rank test needs at least one permutation");
    }
    let mut rng = seed::derived_rng(seed, &[b"signed-rank"]);
    let mut hits = 0u64;
    for _ in 0..n_permutations {
        let w2: u64 = rank2.iter().filter(|_| rng.gen::<bool>()).sum();
        if stat(w2) >= t_obs {
            hits += 1;
        }
    }
    Ok(SignedRank { p_value: (1 + hits) as f64 / (1 + n_permutations) as f64, w_plus, n_used: n, exhaustive: false, degenerate: false })
}

pub const P_CLAMP: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stouffer {
    pub z: f64,
    pub p_value: f64,
    /// Some input p was 0 or 1 and got clamped into `[1e-15, 1 - 1e-15]`.
    pub clamped: bool,
}

/// Weighted Stouffer combination: `z_i = Φ⁻¹(1 - p_i)`,
/// `Z = Σ w_i z_i / sqrt(Σ w_i²)`, combined `p = 1 - Φ(Z)`.
pub fn stouffer_combine(p_values: &[f64], weights: &[f64]) -> Result<Stouffer> {
    if p_values.is_empty() || p_values.len() != weights.len() {
        bail!(Shape, "{} p-values with {} weights", p_values.len(), weights.len());
    }
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        bail!(InvalidArgument, "Stouffer weights must be positive and finite");
    }
    let mut clamped = false;
    let (mut num, mut den) = (0.0, 0.0);
    for (&p, &w) in p_values.iter().zip(weights) {
        if !(0.0..=1.0).contains(&p) {
            bail!(InvalidArgument, "p-value {p} outside [0, 1]");
        }
        let pc = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
        clamped |= pc != p;
        num += w * normal_quantile(1.0 - pc)?;
        den += w * w;
    }
    let z = num / libm::sqrt(den);
    // upper tail computed directly so small p keep their precision
    Ok(Stouffer { z, p_value: 0.5 * libm::erfc(z / core::f64::consts::SQRT_2), clamped })
}

/// `min(m p, 1)` elementwise.
pub fn bonferroni_adjust(p_values: &[f64]) -> Result<Vec<f64>> {
    if p_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
        bail!(InvalidArgument, "p-values must lie in [0, 1]");
    }
    let m = p_values.len() as f64;
    Ok(p_values.iter().map(|p| (m * p).min(1.0)).collect())
}

/// Paired effect size `mean(x - y) / sd(x - y)` with `ddof = 1`; `None` when
/// the differences have zero spread.
pub fn standardized_mean_difference(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        bail!(Shape, "paired samples of lengths {} and {}", x.len(), y.len());
    }
    if x.len() < 2 {
        bail!(InvalidArgument, "effect size needs at least 2 pairs");
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Ok(None);
    }
    Ok(Some(mean / libm::sqrt(var)))
}

/// One model pair compared across paradigms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub model_a: String,
    pub model_b: String,
    pub p_values: BTreeMap<String, f64>,
    pub n: BTreeMap<String, usize>,
    pub smd: BTreeMap<String, Option<f64>>,
    pub combined_p: f64,
    /// Combined p after Bonferroni over every pair in the same family.
    pub adjusted_p: f64,
    pub clamped: bool,
}

impl StatTestResult {
    /// Tests `a` against `b` within each paradigm on paired per-unit scores,
    /// then combines with Stouffer weights `sqrt(n)`. `adjusted_p` is left equal
    /// to `combined_p`; see [`StatTestResult::adjust_family`].
    pub fn compare(
        model_a: &str,
        model_b: &str,
        paired: &BTreeMap<String, (Vec<f64>, Vec<f64>)>,
        n_permutations: usize,
        seed: u64,
    ) -> Result<Self> {
        if paired.is_empty() {
            bail!(InvalidArgument, "no paradigms to compare");
        }
        let (mut p_values, mut n, mut smd) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
        let (mut ps, mut ws) = (Vec::new(), Vec::new());
        for (paradigm, (x, y)) in paired {
            let tag = crate::seed::derive(seed, &[paradigm.as_bytes()]);
            let r = permutation_signed_rank(x, y, n_permutations, tag)?;
            p_values.insert(paradigm.clone(), r.p_value);
            n.insert(paradigm.clone(), x.len());
            smd.insert(paradigm.clone(), standardized_mean_difference(x, y)?);
            ps.push(r.p_value);
            ws.push(libm::sqrt(x.len() as f64));
        }
        let s = stouffer_combine(&ps, &ws)?;
        Ok(Self {
            model_a: model_a.into(),
            model_b: model_b.into(),
            p_values,
            n,
            smd,
            combined_p: s.p_value,
            adjusted_p: s.p_value,
            clamped: s.clamped,
        })
    }

    /// Bonferroni over the combined p-values of a family of comparisons.
    pub fn adjust_family(results: &mut [StatTestResult]) -> Result<()> {
        let raw: Vec<f64> = results.iter().map(|r| r.combined_p).collect();
        for (r, a) in results.iter_mut().zip(bonferroni_adjust(&raw)?) {
            r.adjusted_p = a;
        }
        Ok(())
    }
}
