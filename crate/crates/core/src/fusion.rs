//! Logistic-regression fusion and calibration with log-duration quality terms.
//!
//! Fused score: `S' = w0 + Σ w_i·S_i + w_r·log(d_r) + w_p·log(d_p)`.
//!
//! Training minimizes the prior-weighted logistic loss
//!
//! ```text
//! C(w) = π/N_t · Σ_tar softplus(−(S' + logit π)) + (1−π)/N_n · Σ_non softplus(S' + logit π)
//!        + ridge · ‖w without w0‖²
//! ```
//!
//! which is convex; a damped Newton iteration runs until the gradient norm
//! drops below `1e-8`, then takes up to three polishing steps.

use std::collections::HashSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Error, FileFormatError, Result};
use crate::io::{format_score, parse_score_value};
use crate::metrics::{self, softplus};
use crate::model::{DurationInfo, ScoreMatrix, ScoreSet, Trial, TrialLabel};

pub const BIAS_NAME: &str = "__bias__";
pub const LOG_DR_NAME: &str = "__log_dr__";
pub const LOG_DP_NAME: &str = "__log_dp__";

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub names: Vec<String>,
    pub bias: f64,
    pub weights: Vec<f64>,
    pub w_ref: f64,
    pub w_probe: f64,
}

impl FusionModel {
    pub fn new(names: Vec<String>, bias: f64, weights: Vec<f64>, w_ref: f64, w_probe: f64) -> Result<Self> {
        if names.len() != weights.len() {
            return invalid(format!("{} weights for {} subsystems", weights.len(), names.len()));
        }
        if !bias.is_finite() || !w_ref.is_finite() || !w_probe.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return invalid("fusion weights must be finite");
        }
        Ok(Self {
            names,
            bias,
            weights,
            w_ref,
            w_probe,
        })
    }

    pub fn n_systems(&self) -> usize {
        self.weights.len()
    }

    pub fn uses_durations(&self) -> bool {
        self.w_ref != 0.0 || self.w_probe != 0.0
    }

    fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_systems() + 3);
        p.push(self.bias);
        p.extend_from_slice(&self.weights);
        p.push(self.w_ref);
        p.push(self.w_probe);
        p
    }

    /// Text form: `name<TAB>weight` lines, bias first, duration weights last.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{BIAS_NAME}\t{}", format_score(self.bias));
        for (n, w) in self.names.iter().zip(&self.weights) {
            let _ = writeln!(out, "{n}\t{}", format_score(*w));
        }
        let _ = writeln!(out, "{LOG_DR_NAME}\t{}", format_score(self.w_ref));
        let _ = writeln!(out, "{LOG_DP_NAME}\t{}", format_score(self.w_probe));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut bias = None;
        let (mut w_ref, mut w_probe) = (0.0, 0.0);
        let mut names = Vec::new();
        let mut weights = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.strip_suffix('\r').unwrap_or(raw);
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 2 || f[0].is_empty() {
                return Err(FileFormatError::new(line, "expected 'name<TAB>weight'").into());
            }
            if !seen.insert(f[0].to_string()) {
                return Err(FileFormatError::new(line, format!("duplicate name '{}'", f[0])).into());
            }
            let w = parse_score_value(f[1]).map_err(|m| FileFormatError::new(line, m))?;
            match f[0] {
                BIAS_NAME => bias = Some(w),
                LOG_DR_NAME => w_ref = w,
                LOG_DP_NAME => w_probe = w,
                name => {
                    names.push(name.to_string());
                    weights.push(w);
                }
            }
        }
        let bias = bias.ok_or_else(|| Error::from(FileFormatError::new(1, format!("missing {BIAS_NAME} line"))))?;
        Self::new(names, bias, weights, w_ref, w_probe)
    }
}

fn check_durations(matrix: &ScoreMatrix, durations: Option<&[DurationInfo]>, required: bool) -> Result<()> {
    match durations {
        Some(d) if d.len() != matrix.n_trials() => {
            invalid(format!("{} durations for {} trials", d.len(), matrix.n_trials()))
        }
        None if required => invalid("durations are required by the fusion model's duration weights"),
        _ => Ok(()),
    }
}

/// Fused scores in matrix column order.
pub fn fuse_scores(m: &FusionModel, matrix: &ScoreMatrix, durations: Option<&[DurationInfo]>) -> Result<Vec<f64>> {
    if matrix.n_systems() != m.n_systems() {
        return invalid(format!(
            "fusion model has {} subsystems, score matrix has {}",
            m.n_systems(),
            matrix.n_systems()
        ));
    }
    check_durations(matrix, durations, m.uses_durations())?;
    Ok((0..matrix.n_trials())
        .map(|j| {
            let mut s = m.bias;
            for (w, row) in m.weights.iter().zip(&matrix.rows) {
                s += w * row[j];
            }
            if let Some(d) = durations {
                if m.uses_durations() {
                    s += m.w_ref * d[j].reference.ln() + m.w_probe * d[j].probe.ln();
                }
            }
            s
        })
        .collect())
}

/// Fused score set on the given trials (the key order the matrix was aligned to).
pub fn apply_fusion(
    m: &FusionModel,
    matrix: &ScoreMatrix,
    durations: Option<&[DurationInfo]>,
    trials: &[Trial],
) -> Result<ScoreSet> {
    if trials.len() != matrix.n_trials() {
        return invalid("trial count differs from score matrix width");
    }
    ScoreSet::new(trials.to_vec(), fuse_scores(m, matrix, durations)?)
}

/// Adds a constant to every score.
pub fn apply_offset(scores: &ScoreSet, c: f64) -> Result<ScoreSet> {
    scores.map(|s| s + c)
}

#[derive(Debug, Clone)]
pub struct FusionConfig {
    /// Effective target prior of the training objective.
    pub prior: f64,
    pub use_durations: bool,
    pub ridge: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Optional starting point `[w0, w_1..w_n, (w_r, w_p)]`.
    pub init: Option<Vec<f64>>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            prior: 0.01,
            use_durations: false,
            ridge: 1e-6,
            max_iterations: 200,
            gradient_tolerance: 1e-8,
            init: None,
        }
    }
}

struct Design {
    /// `n_trials × n_features`, first column all ones.
    x: DMatrix<f64>,
    weight: Vec<f64>,
    target: Vec<bool>,
    offset: f64,
    ridge: f64,
}

const CHUNK: usize = 4096;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Design {
    fn n_features(&self) -> usize {
        self.x.ncols()
    }

    /// Objective, gradient and Hessian with a chunked, order-fixed reduction.
    fn evaluate(&self, w: &DVector<f64>, hessian: bool) -> (f64, DVector<f64>, DMatrix<f64>) {
        let k = self.n_features();
        let n = self.x.nrows();
        let chunks: Vec<(f64, DVector<f64>, DMatrix<f64>)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut f = 0.0;
                let mut g = DVector::zeros(k);
                let mut h = DMatrix::zeros(if hessian { k } else { 0 }, if hessian { k } else { 0 });
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let row = self.x.row(i);
                    let z = row.dot(&w.transpose()) + self.offset;
                    let a = self.weight[i];
                    let (loss, dz) = if self.target[i] {
                        (softplus(-z), -sigmoid(-z))
                    } else {
                        (softplus(z), sigmoid(z))
                    };
                    f += a * loss;
                    g.axpy(a * dz, &row.transpose(), 1.0);
                    if hessian {
                        let curv = a * sigmoid(z) * sigmoid(-z);
                        h.ger(curv, &row.transpose(), &row.transpose(), 1.0);
                    }
                }
                (f, g, h)
            })
            .collect();
        let mut f = 0.0;
        let mut g = DVector::zeros(k);
        let mut h = DMatrix::zeros(k, k);
        for (cf, cg, ch) in chunks {
            f += cf;
            g += cg;
            if hessian {
                h += ch;
            }
        }
        for j in 1..k {
            f += self.ridge * w[j] * w[j];
            g[j] += 2.0 * self.ridge * w[j];
            if hessian {
                h[(j, j)] += 2.0 * self.ridge;
            }
        }
        (f, g, h)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn build_design(
    matrix: &ScoreMatrix,
    labels: &[TrialLabel],
    durations: Option<&[DurationInfo]>,
    cfg: &FusionConfig,
) -> Result<Design> {
    if !(cfg.prior > 0.0 && cfg.prior < 1.0) {
        return invalid(format!("prior must lie in (0,1), got {}", cfg.prior));
    }
    if !(cfg.ridge >= 0.0) {
        return invalid("ridge must be nonnegative");
    }
    let n = matrix.n_trials();
    if labels.len() != n {
        return invalid(format!("{} labels for {} trials", labels.len(), n));
    }
    check_durations(matrix, durations, cfg.use_durations)?;
    let nt = labels.iter().filter(|l| l.is_target()).count();
    let nn = n - nt;
    if nt == 0 || nn == 0 {
        return invalid(format!("fusion training needs both classes: {nt} targets, {nn} nontargets"));
    }
    let k = 1 + matrix.n_systems() + if cfg.use_durations { 2 } else { 0 };
    let mut x = DMatrix::zeros(n, k);
    for j in 0..n {
        x[(j, 0)] = 1.0;
        for (i, row) in matrix.rows.iter().enumerate() {
            x[(j, 1 + i)] = row[j];
        }
        if cfg.use_durations {
            let d = durations.expect("checked")[j];
            x[(j, k - 2)] = d.reference.ln();
            x[(j, k - 1)] = d.probe.ln();
        }
    }
    let (at, an) = (cfg.prior / nt as f64, (1.0 - cfg.prior) / nn as f64);
    Ok(Design {
        x,
        weight: labels.iter().map(|l| if l.is_target() { at } else { an }).collect(),
        target: labels.iter().map(|l| l.is_target()).collect(),
        offset: logit(cfg.prior),
        ridge: cfg.ridge,
    })
}

fn newton(design: &Design, mut w: DVector<f64>, cfg: &FusionConfig) -> Result<DVector<f64>> {
    let k = design.n_features();
    let (mut f, mut g, mut h) = design.evaluate(&w, true);
    // once below tolerance, keep taking full Newton steps while they still
    // move the weights; quadratic convergence makes this one or two steps
    let mut polishing = 0;
    for _ in 0..cfg.max_iterations {
        if g.norm() < cfg.gradient_tolerance {
            polishing += 1;
            if polishing > 3 {
                return Ok(w);
            }
        }
        let mut damping = 0.0;
        let step = loop {
            let mut hd = h.clone();
            for j in 0..k {
                hd[(j, j)] += damping;
            }
            if let Some(ch) = hd.cholesky() {
                break ch.solve(&(-&g));
            }
            damping = if damping == 0.0 { 1e-12 * h.diagonal().amax().max(1e-300) } else { damping * 10.0 };
            if !damping.is_finite() {
                return Err(Error::Numerical("fusion Hessian could not be regularized".into()));
            }
        };
        // backtracking line search on the convex objective
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &w + &step * t;
            let (fc, _, _) = design.evaluate(&cand, false);
            if fc <= f + 1e-4 * t * slope || (fc - f).abs() <= 1e-15 * f.abs() {
                w = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        let moved = (&step * t).amax() > 1e-15 * (1.0 + w.amax());
        (f, g, h) = design.evaluate(&w, true);
        if polishing > 0 && !moved {
            break;
        }
    }
    if g.norm() < cfg.gradient_tolerance {
        return Ok(w);
    }
    Err(Error::NoConvergence(format!(
        "fusion gradient norm {:e} after {} iterations (tolerance {:e}); data may be separable, increase ridge",
        g.norm(),
        cfg.max_iterations,
        cfg.gradient_tolerance
    )))
}

/// Trains fusion weights for the aligned subsystem scores.
pub fn train_fusion(
    matrix: &ScoreMatrix,
    labels: &[TrialLabel],
    durations: Option<&[DurationInfo]>,
    cfg: &FusionConfig,
) -> Result<FusionModel> {
    let design = build_design(matrix, labels, durations, cfg)?;
    let k = design.n_features();
    let w0 = match &cfg.init {
        Some(v) if v.len() == k => DVector::from_column_slice(v),
        Some(v) => return invalid(format!("initial point has {} values, expected {k}", v.len())),
        None => DVector::zeros(k),
    };
    let w = newton(&design, w0, cfg)?;
    let n = matrix.n_systems();
    let (w_ref, w_probe) = if cfg.use_durations { (w[n + 1], w[n + 2]) } else { (0.0, 0.0) };
    FusionModel::new(matrix.names.clone(), w[0], w.rows(1, n).iter().copied().collect(), w_ref, w_probe)
}

/// Affine calibration of one system's scores to log-likelihood ratios.
pub fn calibrate_single(scores: &[f64], labels: &[TrialLabel], prior: f64, ridge: f64) -> Result<FusionModel> {
    let m = ScoreMatrix::new(vec!["system".into()], vec![scores.to_vec()])?;
    train_fusion(
        &m,
        labels,
        None,
        &FusionConfig {
            prior,
            ridge,
            ..FusionConfig::default()
        },
    )
}

/// Objective value at a model; exposed for diagnostics and tests.
pub fn fusion_objective(
    m: &FusionModel,
    matrix: &ScoreMatrix,
    labels: &[TrialLabel],
    durations: Option<&[DurationInfo]>,
    cfg: &FusionConfig,
) -> Result<f64> {
    let design = build_design(matrix, labels, durations, cfg)?;
    let mut p = m.params();
    if !cfg.use_durations {
        p.truncate(p.len() - 2);
    }
    Ok(design.evaluate(&DVector::from_vec(p), false).0)
}

/// Range of one subsystem's weighted contribution `w_i·S_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub weight: f64,
}

fn range(weight: f64, values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        let c = weight * v;
        (lo.min(c), hi.max(c))
    })
}

/// Per-subsystem `(min, max)` of `w_i·S_i` over all trials, plus duration
/// rows when the model uses durations and they are supplied.
pub fn contribution_report(
    m: &FusionModel,
    matrix: &ScoreMatrix,
    durations: Option<&[DurationInfo]>,
) -> Result<Vec<Contribution>> {
    if matrix.n_systems() != m.n_systems() {
        return invalid("score matrix does not match the fusion model");
    }
    if matrix.n_trials() == 0 {
        return invalid("contribution report needs at least one trial");
    }
    check_durations(matrix, durations, false)?;
    let mut out: Vec<Contribution> = m
        .names
        .iter()
        .zip(&m.weights)
        .zip(&matrix.rows)
        .map(|((name, &w), row)| {
            let (min, max) = range(w, row.iter().copied());
            Contribution {
                name: name.clone(),
                min,
                max,
                weight: w,
            }
        })
        .collect();
    if let (Some(d), true) = (durations, m.uses_durations()) {
        for (name, w, f) in [
            ("log(d_r)", m.w_ref, (|x: &DurationInfo| x.reference) as fn(&DurationInfo) -> f64),
            ("log(d_p)", m.w_probe, |x: &DurationInfo| x.probe),
        ] {
            let (min, max) = range(w, d.iter().map(|x| f(x).ln()));
            out.push(Contribution {
                name: name.into(),
                min,
                max,
                weight: w,
            });
        }
    }
    Ok(out)
}

/// TSV with columns `subsystem, min, max, weight_x100`.
pub fn format_contributions(rows: &[Contribution]) -> String {
    let mut out = String::from("subsystem\tmin\tmax\tweight_x100\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{:.4}\t{:.4}\t{:.4}", r.name, r.min, r.max, r.weight * 100.0);
    }
    out
}

/// Aligned scores, labels and optional durations for one trial set.
#[derive(Debug, Clone, Copy)]
pub struct FusionData<'a> {
    pub matrix: &'a ScoreMatrix,
    pub labels: &'a [TrialLabel],
    pub durations: Option<&'a [DurationInfo]>,
}

/// Change in evaluation metrics when one subsystem is left out of the fusion
/// (positive means the metric got worse without it).
#[derive(Debug, Clone, PartialEq)]
pub struct JackknifeRow {
    pub left_out: String,
    pub delta_act_c_primary: f64,
    pub delta_min_c_primary: f64,
    pub delta_eer: f64,
    pub delta_cllr: f64,
}

fn eval_metrics(m: &FusionModel, data: &FusionData<'_>) -> Result<[f64; 4]> {
    let s = fuse_scores(m, data.matrix, data.durations)?;
    let cp = metrics::c_primary(&s, data.labels)?;
    Ok([
        cp.act,
        cp.min,
        metrics::eer(&s, data.labels)?,
        metrics::cllr(&s, data.labels)?,
    ])
}

/// Leave-one-subsystem-out retraining; metrics are measured on `eval`.
pub fn jackknife(train: &FusionData<'_>, eval: &FusionData<'_>, cfg: &FusionConfig) -> Result<Vec<JackknifeRow>> {
    let n = train.matrix.n_systems();
    if n < 2 {
        return invalid("jackknife needs at least two subsystems");
    }
    if eval.matrix.n_systems() != n {
        return invalid("training and evaluation matrices have different subsystem counts");
    }
    let cfg = FusionConfig { init: None, ..cfg.clone() };
    let full = train_fusion(train.matrix, train.labels, train.durations, &cfg)?;
    let base = eval_metrics(&full, eval)?;
    (0..n)
        .map(|k| {
            let tm = train.matrix.without_system(k);
            let em = eval.matrix.without_system(k);
            let m = train_fusion(&tm, train.labels, train.durations, &cfg)?;
            let v = eval_metrics(
                &m,
                &FusionData {
                    matrix: &em,
                    ..*eval
                },
            )?;
            Ok(JackknifeRow {
                left_out: train.matrix.names[k].clone(),
                delta_act_c_primary: v[0] - base[0],
                delta_min_c_primary: v[1] - base[1],
                delta_eer: v[2] - base[2],
                delta_cllr: v[3] - base[3],
            })
        })
        .collect()
}

pub fn format_jackknife(rows: &[JackknifeRow]) -> String {
    let mut out = String::from("left_out\tdelta_act_cprimary\tdelta_min_cprimary\tdelta_eer\tdelta_cllr\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.left_out, r.delta_act_c_primary, r.delta_min_c_primary, r.delta_eer, r.delta_cllr
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use TrialLabel::{Nontarget as N, Target as T};

    fn matrix(rows: Vec<Vec<f64>>) -> ScoreMatrix {
        let names = (0..rows.len()).map(|i| format!("s{i}")).collect();
        ScoreMatrix::new(names, rows).unwrap()
    }

    #[test]
    fn apply_examples() {
        let m = FusionModel::new(vec!["a".into()], 0.0, vec![1.0], 0.0, 0.0).unwrap();
        let x = matrix(vec![vec![0.5, -3.0]]);
        assert_eq!(fuse_scores(&m, &x, None).unwrap(), vec![0.5, -3.0]);
        let c = FusionModel::new(vec!["a".into()], 12.5, vec![0.0], 0.0, 0.0).unwrap();
        assert_eq!(fuse_scores(&c, &x, None).unwrap(), vec![12.5, 12.5]);
        let d = FusionModel::new(vec!["a".into()], 0.0, vec![1.0], -0.4, 0.7).unwrap();
        let ones = [DurationInfo::new(1.0, 1.0).unwrap(); 2];
        assert_eq!(fuse_scores(&d, &x, Some(&ones)).unwrap(), vec![0.5, -3.0]);
        assert!(fuse_scores(&d, &x, None).is_err());
    }

    #[test]
    fn text_round_trip() {
        let m = FusionModel::new(vec!["sysA".into(), "sysB".into()], 12.5, vec![0.276, -0.035], -0.398, -0.527).unwrap();
        assert_eq!(FusionModel::from_text(&m.to_text()).unwrap(), m);
        assert!(FusionModel::from_text("a\t1\n").is_err());
        assert!(FusionModel::from_text("__bias__\t1\n__bias__\t2\n").is_err());
    }

    #[test]
    fn identical_subsystems_split_evenly() {
        let s: Vec<f64> = (0..200).map(|i| ((i * 37 % 101) as f64) / 20.0 - 2.5).collect();
        let labels: Vec<TrialLabel> = (0..200).map(|i| if (i * 37 % 101) % 3 == 0 { T } else { N }).collect();
        let x = matrix(vec![s.clone(), s]);
        let m = train_fusion(&x, &labels, None, &FusionConfig::default()).unwrap();
        assert!((m.weights[0] - m.weights[1]).abs() < 1e-6, "{m:?}");
    }

    #[test]
    fn offset_examples() {
        let s = ScoreSet::new(vec![Trial::new("m", "a"), Trial::new("m", "b")], vec![1.0, -0.5]).unwrap();
        assert_eq!(apply_offset(&s, -2.0).unwrap().scores(), &[-1.0, -2.5]);
        assert_eq!(apply_offset(&s, 0.0).unwrap(), s);
    }

    #[test]
    fn contribution_examples() {
        let m = FusionModel::new(vec!["a".into(), "b".into()], 1.0, vec![0.0, 2.0], 0.0, 0.0).unwrap();
        let x = matrix(vec![vec![1.0, -4.0, 3.0], vec![1.0, -4.0, 3.0]]);
        let r = contribution_report(&m, &x, None).unwrap();
        assert_eq!((r[0].min, r[0].max), (0.0, 0.0));
        assert_eq!((r[1].min, r[1].max), (-8.0, 6.0));
        let one = matrix(vec![vec![2.0], vec![3.0]]);
        let r = contribution_report(&m, &one, None).unwrap();
        assert_eq!(r[1].min, r[1].max);
        let tsv = format_contributions(&r);
        assert!(tsv.starts_with("subsystem\tmin\tmax\tweight_x100\n"));
        assert!(tsv.contains("b\t6.0000\t6.0000\t200.0000"));
    }

    #[test]
    fn jackknife_requires_two() {
        let x = matrix(vec![vec![1.0, 0.0]]);
        let d = FusionData {
            matrix: &x,
            labels: &[T, N],
            durations: None,
        };
        assert!(jackknife(&d, &d, &FusionConfig::default()).is_err());
    }
}
