//! Cohort-based score normalization: adaptive symmetric S-norm and Cal-Norm.

use std::collections::HashMap;

use crate::error::{invalid, Error, Result};
use crate::model::ScoreSet;

/// Mean and standard deviation of the selected top cohort scores of one side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Number of top cohort scores kept: `ceil(fraction·n)`, at least one.
/// A small tolerance keeps products like `0.3·10` from rounding up.
pub fn top_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Statistics of the `ceil(fraction·n)` highest cohort scores. Ties are
/// broken by ascending cohort index. The standard deviation is the population
/// value and may be zero; callers decide whether that is an error.
pub fn cohort_stats(cohort: &[f64], top_fraction: f64) -> Result<NormStats> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return invalid(format!("top fraction must lie in (0,1], got {top_fraction}"));
    }
    if cohort.is_empty() {
        return invalid("cohort score list is empty");
    }
    if cohort.iter().any(|v| !v.is_finite()) {
        return invalid("cohort scores must be finite");
    }
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    order.sort_by(|&a, &b| cohort[b].total_cmp(&cohort[a]).then(a.cmp(&b)));
    let k = top_count(top_fraction, cohort.len());
    let top: Vec<f64> = order[..k].iter().map(|&i| cohort[i]).collect();
    let mean = top.iter().sum::<f64>() / k as f64;
    let var = top.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
    Ok(NormStats {
        mean,
        std: var.sqrt(),
    })
}

fn side_stats(
    lists: &HashMap<String, Vec<f64>>,
    top_fraction: f64,
    what: &str,
) -> Result<HashMap<String, NormStats>> {
    lists
        .iter()
        .map(|(id, l)| {
            cohort_stats(l, top_fraction)
                .map(|s| (id.clone(), s))
                .map_err(|e| Error::Invalid(format!("{what} cohort of '{id}': {e}")))
        })
        .collect()
}

/// Applies `f(score, enroll_stats, probe_stats)` to every trial.
fn normalize(
    raw: &ScoreSet,
    enroll_cohort: &HashMap<String, Vec<f64>>,
    probe_cohort: &HashMap<String, Vec<f64>>,
    top_fraction: f64,
    f: impl Fn(f64, NormStats, NormStats) -> f64,
) -> Result<ScoreSet> {
    let es = side_stats(enroll_cohort, top_fraction, "enrollment")?;
    let ps = side_stats(probe_cohort, top_fraction, "probe")?;
    let mut out = Vec::with_capacity(raw.len());
    for (t, &s) in raw.trials().iter().zip(raw.scores()) {
        let e = *es
            .get(&t.model_id)
            .ok_or_else(|| Error::Invalid(format!("no enrollment cohort scores for model '{}'", t.model_id)))?;
        let p = *ps
            .get(&t.segment_id)
            .ok_or_else(|| Error::Invalid(format!("no probe cohort scores for segment '{}'", t.segment_id)))?;
        for (side, st) in [("enrollment", e), ("probe", p)] {
            if !(st.std > 0.0) {
                return invalid(format!("trial {t}: {side} cohort standard deviation is zero"));
            }
        }
        out.push(f(s, e, p));
    }
    ScoreSet::new(raw.trials().to_vec(), out)
}

/// Adaptive symmetric S-norm: `½[(s−μ_e)/σ_e + (s−μ_t)/σ_t]` with statistics
/// over the top `top_fraction` of each side's cohort scores.
pub fn adaptive_snorm(
    raw: &ScoreSet,
    enroll_cohort: &HashMap<String, Vec<f64>>,
    probe_cohort: &HashMap<String, Vec<f64>>,
    top_fraction: f64,
) -> Result<ScoreSet> {
    normalize(raw, enroll_cohort, probe_cohort, top_fraction, |s, e, p| {
        0.5 * ((s - e.mean) / e.std + (s - p.mean) / p.std)
    })
}

/// Cal-Norm: `s − (a·μ̄ + b·σ̄)` where `μ̄`, `σ̄` average the two sides'
/// adaptive cohort statistics.
pub fn cal_norm(
    raw: &ScoreSet,
    enroll_cohort: &HashMap<String, Vec<f64>>,
    probe_cohort: &HashMap<String, Vec<f64>>,
    top_fraction: f64,
    a: f64,
    b: f64,
) -> Result<ScoreSet> {
    normalize(raw, enroll_cohort, probe_cohort, top_fraction, |s, e, p| {
        let mean = 0.5 * (e.mean + p.mean);
        let std = 0.5 * (e.std + p.std);
        s - (a * mean + b * std)
    })
}
