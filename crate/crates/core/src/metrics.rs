//! Detection metrics over aligned (score, label) vectors.
//!
//! A trial is accepted iff `score >= threshold`. All rates are computed from
//! exact counts.

use std::collections::BTreeMap;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::model::{align, OperatingPoint, ScoreSet, TrialKey, TrialLabel, PRIMARY_OPERATING_POINTS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Exact error counts at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Counts {
    misses: usize,
    false_alarms: usize,
}

struct Classes {
    n_target: usize,
    n_nontarget: usize,
}

fn classes(scores: &[f64], labels: &[TrialLabel]) -> Result<Classes> {
    if scores.len() != labels.len() {
        return invalid(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return invalid(format!("non-finite score {s}"));
    }
    let n_target = labels.iter().filter(|l| l.is_target()).count();
    let n_nontarget = labels.len() - n_target;
    if n_target == 0 || n_nontarget == 0 {
        return invalid(format!(
            "metrics need both classes: {n_target} targets, {n_nontarget} nontargets"
        ));
    }
    Ok(Classes {
        n_target,
        n_nontarget,
    })
}

/// Thresholds in increasing order with their error counts: `-inf`, each
/// distinct score, `+inf`.
fn sweep(scores: &[f64], labels: &[TrialLabel], c: &Classes) -> Vec<(f64, Counts)> {
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().map(|l| l.is_target())).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::with_capacity(pairs.len() + 2);
    out.push((
        f64::NEG_INFINITY,
        Counts {
            misses: 0,
            false_alarms: c.n_nontarget,
        },
    ));
    let (mut targets_below, mut nontargets_below) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        out.push((
            v,
            Counts {
                misses: targets_below,
                false_alarms: c.n_nontarget - nontargets_below,
            },
        ));
        while i < pairs.len() && pairs[i].0 == v {
            if pairs[i].1 {
                targets_below += 1;
            } else {
                nontargets_below += 1;
            }
            i += 1;
        }
    }
    out.push((
        f64::INFINITY,
        Counts {
            misses: c.n_target,
            false_alarms: 0,
        },
    ));
    out
}

fn rates(k: Counts, c: &Classes) -> (f64, f64) {
    (
        k.misses as f64 / c.n_target as f64,
        k.false_alarms as f64 / c.n_nontarget as f64,
    )
}

fn normalized_dcf(op: &OperatingPoint, p_miss: f64, p_fa: f64) -> f64 {
    (op.p_target * op.c_miss * p_miss + (1.0 - op.p_target) * op.c_fa * p_fa) / op.normalizer()
}

/// ROC operating points in increasing threshold order, including the
/// accept-all (`-inf`) and reject-all (`+inf`) sentinels.
pub fn roc_points(scores: &[f64], labels: &[TrialLabel]) -> Result<Vec<RocPoint>> {
    let c = classes(scores, labels)?;
    Ok(sweep(scores, labels, &c)
        .into_iter()
        .map(|(threshold, k)| {
            let (p_miss, p_fa) = rates(k, &c);
            RocPoint {
                threshold,
                p_miss,
                p_fa,
            }
        })
        .collect())
}

/// Equal error rate: the first crossing of `Pmiss` and `Pfa` along the
/// threshold sweep, linearly interpolated between adjacent ROC points.
pub fn eer(scores: &[f64], labels: &[TrialLabel]) -> Result<f64> {
    let pts = roc_points(scores, labels)?;
    Ok(eer_from_points(&pts))
}

pub(crate) fn eer_from_points(pts: &[RocPoint]) -> f64 {
    let i = pts
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("the +inf sentinel always crosses");
    let cur = pts[i];
    if cur.p_miss == cur.p_fa || i == 0 {
        return cur.p_miss;
    }
    let prev = pts[i - 1];
    let d_miss = cur.p_miss - prev.p_miss;
    let d_fa = cur.p_fa - prev.p_fa;
    let t = (prev.p_fa - prev.p_miss) / (d_miss - d_fa);
    prev.p_miss + t * d_miss
}

/// Minimum normalized detection cost over all thresholds.
pub fn min_dcf(scores: &[f64], labels: &[TrialLabel], op: &OperatingPoint) -> Result<f64> {
    let c = classes(scores, labels)?;
    Ok(sweep(scores, labels, &c)
        .into_iter()
        .map(|(_, k)| {
            let (m, f) = rates(k, &c);
            normalized_dcf(op, m, f)
        })
        .fold(f64::INFINITY, f64::min))
}

/// Normalized detection cost at the Bayes threshold implied by treating the
/// scores as log-likelihood ratios.
pub fn act_dcf(scores: &[f64], labels: &[TrialLabel], op: &OperatingPoint) -> Result<f64> {
    let c = classes(scores, labels)?;
    let theta = op.bayes_threshold();
    let mut k = Counts {
        misses: 0,
        false_alarms: 0,
    };
    for (s, l) in scores.iter().zip(labels) {
        match (l.is_target(), *s >= theta) {
            (true, false) => k.misses += 1,
            (false, true) => k.false_alarms += 1,
            _ => {}
        }
    }
    let (m, f) = rates(k, &c);
    Ok(normalized_dcf(op, m, f))
}

/// Minimum and actual C_primary: the mean normalized DCF over the two
/// working points `P_target ∈ {0.01, 0.005}` with unit costs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CPrimary {
    pub min: f64,
    pub act: f64,
}

pub fn c_primary(scores: &[f64], labels: &[TrialLabel]) -> Result<CPrimary> {
    let n = PRIMARY_OPERATING_POINTS.len() as f64;
    let mut out = CPrimary { min: 0.0, act: 0.0 };
    for op in &PRIMARY_OPERATING_POINTS {
        out.min += min_dcf(scores, labels, op)?;
        out.act += act_dcf(scores, labels, op)?;
    }
    out.min /= n;
    out.act /= n;
    Ok(out)
}

pub fn min_c_primary(scores: &[f64], labels: &[TrialLabel]) -> Result<f64> {
    Ok(c_primary(scores, labels)?.min)
}

pub fn act_c_primary(scores: &[f64], labels: &[TrialLabel]) -> Result<f64> {
    Ok(c_primary(scores, labels)?.act)
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Log-likelihood-ratio cost in bits.
pub fn cllr(scores: &[f64], labels: &[TrialLabel]) -> Result<f64> {
    let c = classes(scores, labels)?;
    let (mut tar, mut non) = (0.0, 0.0);
    for (s, l) in scores.iter().zip(labels) {
        if l.is_target() {
            tar += softplus(-s);
        } else {
            non += softplus(*s);
        }
    }
    Ok(0.5 * (tar / c.n_target as f64 + non / c.n_nontarget as f64) / std::f64::consts::LN_2)
}

/// Cllr after the optimal monotone (pool-adjacent-violators) mapping of
/// scores to log-likelihood ratios. Tied scores always share one value.
pub fn min_cllr(scores: &[f64], labels: &[TrialLabel]) -> Result<f64> {
    let c = classes(scores, labels)?;
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().map(|l| l.is_target())).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // (targets, count) per block
    let mut blocks: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        let (mut t, mut n) = (0.0, 0.0);
        while i < pairs.len() && pairs[i].0 == v {
            t += pairs[i].1 as u8 as f64;
            n += 1.0;
            i += 1;
        }
        blocks.push((t, n));
        while blocks.len() > 1 {
            let (t1, n1) = blocks[blocks.len() - 1];
            let (t0, n0) = blocks[blocks.len() - 2];
            if t0 / n0 >= t1 / n1 {
                blocks.pop();
                *blocks.last_mut().unwrap() = (t0 + t1, n0 + n1);
            } else {
                break;
            }
        }
    }
    let odds_ratio = c.n_target as f64 / c.n_nontarget as f64;
    let (mut tar, mut non) = (0.0, 0.0);
    for (t, n) in blocks {
        let p = t / n;
        if t > 0.0 {
            tar += t * ((1.0 - p) / p * odds_ratio).ln_1p();
        }
        if n - t > 0.0 {
            non += (n - t) * (p / (1.0 - p) / odds_ratio).ln_1p();
        }
    }
    Ok(0.5 * (tar / c.n_target as f64 + non / c.n_nontarget as f64) / std::f64::consts::LN_2)
}

/// Computes `metric` per partition and returns the unweighted mean.
pub fn equalized<F>(metric: F, scores: &[f64], labels: &[TrialLabel], partitions: Option<&[String]>) -> Result<f64>
where
    F: Fn(&[f64], &[TrialLabel]) -> Result<f64>,
{
    let parts = partitions.ok_or_else(|| Error::Invalid("equalized metric needs partition labels".into()))?;
    if parts.len() != scores.len() || labels.len() != scores.len() {
        return invalid("partition, label and score counts differ");
    }
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<TrialLabel>)> = BTreeMap::new();
    for ((p, s), l) in parts.iter().zip(scores).zip(labels) {
        let g = groups.entry(p.as_str()).or_default();
        g.0.push(*s);
        g.1.push(*l);
    }
    if groups.is_empty() {
        return invalid("no trials");
    }
    let mut total = 0.0;
    for (name, (s, l)) in &groups {
        let nt = l.iter().filter(|x| x.is_target()).count();
        if nt == 0 || nt == l.len() {
            return invalid(format!("partition '{name}' contains only one trial class"));
        }
        total += metric(s, l)?;
    }
    Ok(total / groups.len() as f64)
}

const DET_CLIP: f64 = 1e-6;

/// ROC points in normal-deviate coordinates `(probit(Pfa), probit(Pmiss))`,
/// rates clipped to `[1e-6, 1−1e-6]` first.
pub fn det_points(scores: &[f64], labels: &[TrialLabel]) -> Result<Vec<(f64, f64)>> {
    let normal = Normal::standard();
    let probit = |p: f64| normal.inverse_cdf(p.clamp(DET_CLIP, 1.0 - DET_CLIP));
    Ok(roc_points(scores, labels)?
        .into_iter()
        .map(|p| (probit(p.p_fa), probit(p.p_miss)))
        .collect())
}

/// Headline metrics for one score set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub eer: f64,
    pub min_c_primary: f64,
    pub act_c_primary: f64,
    pub cllr: f64,
    pub min_cllr: f64,
}

pub fn summarize(scores: &[f64], labels: &[TrialLabel]) -> Result<Summary> {
    let cp = c_primary(scores, labels)?;
    Ok(Summary {
        eer: eer(scores, labels)?,
        min_c_primary: cp.min,
        act_c_primary: cp.act,
        cllr: cllr(scores, labels)?,
        min_cllr: min_cllr(scores, labels)?,
    })
}

/// Aligns a score set to a key and summarizes it.
pub fn evaluate(scores: &ScoreSet, key: &TrialKey) -> Result<Summary> {
    let m = align(&[("scores", scores)], key)?;
    summarize(&m.rows[0], key.labels())
}

#[cfg(test)]
mod tests {
    use super::*;
    use TrialLabel::{Nontarget as N, Target as T};

    const FIX_S: [f64; 4] = [1.0, 3.0, 0.0, 2.0];
    const FIX_L: [TrialLabel; 4] = [T, T, N, N];

    fn op(p: f64) -> OperatingPoint {
        OperatingPoint::unit_cost(p).unwrap()
    }

    #[test]
    fn hand_fixture() {
        let pts = roc_points(&FIX_S, &FIX_L).unwrap();
        let at2 = pts.iter().find(|p| p.threshold == 2.0).unwrap();
        assert_eq!((at2.p_miss, at2.p_fa), (0.5, 0.5));
        assert_eq!(eer(&FIX_S, &FIX_L).unwrap(), 0.5);
        assert_eq!(min_dcf(&FIX_S, &FIX_L, &op(0.01)).unwrap(), 0.5);
        assert_eq!(act_dcf(&FIX_S, &FIX_L, &op(0.01)).unwrap(), 1.0);
    }

    #[test]
    fn hand_fixture_cost_regions() {
        // thresholds -inf, 0, 1, 2, 3, +inf give costs 99, 99, 49.5, 50, 0.5, 1
        let c = classes(&FIX_S, &FIX_L).unwrap();
        let costs: Vec<f64> = sweep(&FIX_S, &FIX_L, &c)
            .into_iter()
            .map(|(_, k)| {
                let (m, f) = rates(k, &c);
                normalized_dcf(&op(0.01), m, f)
            })
            .collect();
        let expect = [99.0, 99.0, 49.5, 50.0, 0.5, 1.0];
        for (a, b) in costs.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{costs:?}");
        }
    }

    #[test]
    fn separated_and_inverted() {
        let s = [2.0, 3.0, 0.0, 1.0];
        assert_eq!(eer(&s, &FIX_L).unwrap(), 0.0);
        assert_eq!(min_dcf(&s, &FIX_L, &op(0.01)).unwrap(), 0.0);
        assert_eq!(min_c_primary(&s, &FIX_L).unwrap(), 0.0);
        let pts = roc_points(&s, &FIX_L).unwrap();
        assert!(pts.iter().any(|p| p.p_miss == 0.0 && p.p_fa == 0.0));
        let inv = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(eer(&inv, &FIX_L).unwrap(), 1.0);
    }

    #[test]
    fn all_equal_scores() {
        let s = [1.0; 4];
        let pts = roc_points(&s, &FIX_L).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!((pts[0].p_miss, pts[0].p_fa), (0.0, 1.0));
        assert_eq!((pts[2].p_miss, pts[2].p_fa), (1.0, 0.0));
    }

    #[test]
    fn act_reject_all_is_one() {
        let s = [-1e6; 4];
        assert_eq!(act_c_primary(&s, &FIX_L).unwrap(), 1.0);
        assert!(act_dcf(&FIX_S, &FIX_L, &op(0.01)).unwrap() >= min_dcf(&FIX_S, &FIX_L, &op(0.01)).unwrap());
    }

    #[test]
    fn cllr_examples() {
        assert!((cllr(&[0.0; 4], &FIX_L).unwrap() - 1.0).abs() < 1e-15);
        let perfect = [50.0, 50.0, -50.0, -50.0];
        assert!(cllr(&perfect, &FIX_L).unwrap() < 1e-20);
        assert!(min_cllr(&FIX_S, &FIX_L).unwrap() <= cllr(&FIX_S, &FIX_L).unwrap());
        // separable: PAV maps to ±inf, min Cllr is zero
        assert_eq!(min_cllr(&[2.0, 3.0, 0.0, 1.0], &FIX_L).unwrap(), 0.0);
        // no information: min Cllr is 1 bit
        assert!((min_cllr(&[0.0; 4], &FIX_L).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn equalized_examples() {
        let parts: Vec<String> = ["a", "a", "a", "a"].iter().map(|s| s.to_string()).collect();
        let pooled = eer(&FIX_S, &FIX_L).unwrap();
        assert_eq!(equalized(eer, &FIX_S, &FIX_L, Some(&parts)).unwrap(), pooled);
        assert!(equalized(eer, &FIX_S, &FIX_L, None).is_err());
        // partition x: separated (EER 0); partition y: fixture (EER 0.5)... mean 0.25
        let s = [2.0, 3.0, 0.0, 1.0, 1.0, 3.0, 0.0, 2.0];
        let l = [T, T, N, N, T, T, N, N];
        let p: Vec<String> = ["x", "x", "x", "x", "y", "y", "y", "y"].iter().map(|s| s.to_string()).collect();
        assert_eq!(equalized(eer, &s, &l, Some(&p)).unwrap(), 0.25);
        let bad: Vec<String> = ["x", "x", "y", "y"].iter().map(|s| s.to_string()).collect();
        let e = equalized(eer, &FIX_S, &FIX_L, Some(&bad)).unwrap_err();
        assert!(e.to_string().contains("'x'"), "{e}");
    }

    #[test]
    fn det_coordinates() {
        let d = det_points(&FIX_S, &FIX_L).unwrap();
        assert!(d.iter().any(|&(x, y)| x.abs() < 1e-12 && y.abs() < 1e-12));
        assert!(d.iter().all(|(x, y)| x.is_finite() && y.is_finite()));
        for w in d.windows(2) {
            assert!(w[1].0 <= w[0].0 && w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn needs_both_classes() {
        assert!(eer(&[1.0, 2.0], &[T, T]).is_err());
        assert!(cllr(&[1.0], &[N]).is_err());
    }
}
