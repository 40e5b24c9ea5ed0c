//! Gaussian two-covariance PLDA.
//!
//! Speaker variable `y ~ N(mu, B)`, observation `x | y ~ N(y, W)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::model::EmbeddingSet;

use super::scoring::{PairScorer, Prepared};

#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    mean: DVector<f64>,
    between: DMatrix<f64>,
    within: DMatrix<f64>,
}

const SYMMETRY_TOL: f64 = 1e-8;

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > SYMMETRY_TOL * scale {
        return invalid(format!("{what} is not symmetric"));
    }
    Ok(())
}

impl PldaModel {
    pub fn new(mean: DVector<f64>, between: DMatrix<f64>, within: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return invalid("PLDA dimension must be positive");
        }
        for (m, what) in [(&between, "between covariance"), (&within, "within covariance")] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    got: m.nrows(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return invalid(format!("{what} has non-finite entries"));
            }
            check_symmetric(m, what)?;
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return invalid("PLDA mean has non-finite entries");
        }
        let within = linalg::symmetrize(within);
        let between = linalg::symmetrize(between);
        if !linalg::is_positive_definite(&within) {
            return invalid("within-speaker covariance is not positive definite");
        }
        let (vals, _) = linalg::sym_eigen(&between);
        let scale = between.amax().max(within.amax());
        if vals.iter().any(|&v| v < -1e-10 * scale) {
            return invalid("between-speaker covariance is not positive semi-definite");
        }
        Ok(Self {
            mean,
            between,
            within,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn between(&self) -> &DMatrix<f64> {
        &self.between
    }

    pub fn within(&self) -> &DMatrix<f64> {
        &self.within
    }

    /// Closed-form scoring parameters.
    pub fn scoring(&self) -> Result<PldaScorer> {
        PldaScorer::new(self)
    }
}

/// Precomputed quadratic form of the PLDA log-likelihood ratio:
/// `llr = ½e'ᵀQe' + ½t'ᵀQt' + e'ᵀPt' + k` with `e' = e − mu`, `t' = t − mu`.
#[derive(Debug, Clone)]
pub struct PldaScorer {
    pub mean: DVector<f64>,
    /// `½Q`
    pub half_q: DMatrix<f64>,
    /// `P`, symmetric.
    pub p: DMatrix<f64>,
    pub constant: f64,
}

impl PldaScorer {
    pub fn new(m: &PldaModel) -> Result<Self> {
        let total = &m.between + &m.within;
        let total_inv = linalg::spd_inverse(&total, "total covariance B+W")?;
        // Schur complement of the same-speaker joint covariance
        let schur = linalg::symmetrize(&total - &m.between * &total_inv * &m.between);
        let schur_inv = linalg::spd_inverse(&schur, "conditional covariance")?;
        let q = linalg::symmetrize(&total_inv - &schur_inv);
        let p = linalg::symmetrize(&total_inv * &m.between * &schur_inv);
        let constant = 0.5 * linalg::log_det_spd(&total, "total covariance")?
            - 0.5 * linalg::log_det_spd(&schur, "conditional covariance")?;
        Ok(Self {
            mean: m.mean.clone(),
            half_q: q * 0.5,
            p,
            constant,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn centered(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x) - &self.mean
    }

    /// Single-trial LLR; exactly symmetric in its arguments.
    pub fn score(&self, e: &[f64], t: &[f64]) -> Result<f64> {
        for x in [e, t] {
            if x.len() != self.dim() {
                return Err(Error::DimMismatch {
                    expected: self.dim(),
                    got: x.len(),
                });
            }
        }
        let e = self.centered(e);
        let t = self.centered(t);
        let qe = e.dot(&(&self.half_q * &e));
        let qt = t.dot(&(&self.half_q * &t));
        let cross = 0.5 * (e.dot(&(&self.p * &t)) + t.dot(&(&self.p * &e)));
        Ok(cross + (qe + qt) + self.constant)
    }
}

impl PairScorer for PldaScorer {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn prepare_enroll(&self, x: &[f64], _frames: Option<f64>) -> Prepared {
        let c = self.centered(x);
        let q = c.dot(&(&self.half_q * &c));
        Prepared {
            v: (&self.p * c).as_slice().to_vec(),
            q,
            frames: None,
        }
    }

    fn prepare_probe(&self, x: &[f64], _frames: Option<f64>) -> Prepared {
        let c = self.centered(x);
        let q = c.dot(&(&self.half_q * &c));
        Prepared {
            v: c.as_slice().to_vec(),
            q,
            frames: None,
        }
    }

    fn score_prepared(&self, e: &Prepared, t: &Prepared) -> f64 {
        super::scoring::dot(&e.v, &t.v) + (e.q + t.q) + self.constant
    }
}

/// Scores one trial; multi-segment enrollment is averaged first.
pub fn score_plda(m: &PldaModel, enroll: &[&[f64]], probe: &[f64]) -> Result<f64> {
    let e = super::scoring::average(enroll, m.dim())?;
    m.scoring()?.score(&e, probe)
}

/// Parameter-wise `(1−α)·out + α·in`.
pub fn interpolate_plda(m_out: &PldaModel, m_in: &PldaModel, alpha: f64) -> Result<PldaModel> {
    interpolate_parts(m_out, m_in, alpha, alpha, alpha)
}

fn interpolate_parts(m_out: &PldaModel, m_in: &PldaModel, a_mu: f64, a_b: f64, a_w: f64) -> Result<PldaModel> {
    if m_out.dim() != m_in.dim() {
        return Err(Error::DimMismatch {
            expected: m_out.dim(),
            got: m_in.dim(),
        });
    }
    for a in [a_mu, a_b, a_w] {
        if !(0.0..=1.0).contains(&a) {
            return invalid(format!("interpolation weight must lie in [0,1], got {a}"));
        }
    }
    PldaModel::new(
        &m_out.mean * (1.0 - a_mu) + &m_in.mean * a_mu,
        &m_out.between * (1.0 - a_b) + &m_in.between * a_b,
        &m_out.within * (1.0 - a_w) + &m_in.within * a_w,
    )
}

/// EM fit plus diagnostics.
#[derive(Debug, Clone)]
pub struct PldaFit {
    pub model: PldaModel,
    /// Marginal log-likelihood of the training data at the initial model and
    /// after every iteration (`iterations + 1` values).
    pub log_likelihoods: Vec<f64>,
    pub warnings: Vec<String>,
}

struct SpeakerStats {
    n: usize,
    mean: DVector<f64>,
}

struct TrainingStats {
    dim: usize,
    n_total: usize,
    speakers: Vec<SpeakerStats>,
    /// Σ over speakers of Σ_i (x_i − x̄_s)(x_i − x̄_s)ᵀ
    within_scatter: DMatrix<f64>,
    /// distinct utterance counts
    counts: Vec<usize>,
}

impl TrainingStats {
    fn new(set: &EmbeddingSet) -> Result<Self> {
        let groups = set.speakers()?;
        let d = set.dim();
        let mut speakers = Vec::with_capacity(groups.len());
        let mut within_scatter = DMatrix::zeros(d, d);
        for idx in groups.values() {
            let mut mean = DVector::zeros(d);
            for &i in idx {
                mean += DVector::from_column_slice(&set.records()[i].vector);
            }
            mean /= idx.len() as f64;
            for &i in idx {
                let c = DVector::from_column_slice(&set.records()[i].vector) - &mean;
                within_scatter.ger(1.0, &c, &c, 1.0);
            }
            speakers.push(SpeakerStats { n: idx.len(), mean });
        }
        let mut counts: Vec<usize> = speakers.iter().map(|s| s.n).collect();
        counts.sort_unstable();
        counts.dedup();
        Ok(Self {
            dim: d,
            n_total: set.len(),
            speakers,
            within_scatter: linalg::symmetrize(within_scatter),
            counts,
        })
    }
}

/// Posterior quantities shared by all speakers with `n` utterances.
struct CountTerms {
    gain: DMatrix<f64>,
    post_cov: DMatrix<f64>,
    marg_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    marg_logdet: f64,
}

fn count_terms(b: &DMatrix<f64>, w: &DMatrix<f64>, n: usize) -> Result<CountTerms> {
    let marg = linalg::symmetrize(b + w / n as f64);
    let chol = linalg::cholesky(&marg, "speaker-mean marginal covariance")?;
    let marg_inv = linalg::symmetrize(chol.inverse());
    let gain = b * &marg_inv;
    let post_cov = linalg::symmetrize(b - &gain * b);
    let marg_logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(CountTerms {
        gain,
        post_cov,
        marg_chol: chol,
        marg_logdet,
    })
}

fn log_likelihood(
    stats: &TrainingStats,
    mu: &DVector<f64>,
    w: &DMatrix<f64>,
    terms: &BTreeMap<usize, CountTerms>,
) -> Result<f64> {
    let d = stats.dim as f64;
    let ln2pi = (2.0 * PI).ln();
    let w_chol = linalg::cholesky(w, "within covariance")?;
    let w_logdet = 2.0 * w_chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let w_inv = w_chol.inverse();
    let mut ll = -0.5 * w_inv.component_mul(&stats.within_scatter).sum();
    for s in &stats.speakers {
        let t = &terms[&s.n];
        let diff = &s.mean - mu;
        let sol = t.marg_chol.solve(&diff);
        let n = s.n as f64;
        ll += -0.5 * (d * ln2pi + t.marg_logdet + diff.dot(&sol));
        ll += -0.5 * (n - 1.0) * (d * ln2pi + w_logdet) - 0.5 * d * n.ln();
    }
    Ok(ll)
}

fn initial_params(stats: &TrainingStats, warnings: &mut Vec<String>) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let d = stats.dim;
    let n = stats.n_total as f64;
    let mut mu = DVector::zeros(d);
    for s in &stats.speakers {
        mu += &s.mean * s.n as f64;
    }
    mu /= n;
    let mut between = DMatrix::zeros(d, d);
    let mut total = stats.within_scatter.clone();
    for s in &stats.speakers {
        let c = &s.mean - &mu;
        between.ger(1.0 / stats.speakers.len() as f64, &c, &c, 1.0);
        total.ger(s.n as f64, &c, &c, 1.0);
    }
    total /= n;
    let n_multi: usize = stats.speakers.iter().filter(|s| s.n > 1).map(|s| s.n).sum();
    let mut within = if n_multi > 0 {
        &stats.within_scatter / (n_multi - stats.speakers.iter().filter(|s| s.n > 1).count()).max(1) as f64
    } else {
        warnings.push("PLDA: no speaker has more than one utterance; within covariance is not identifiable".into());
        &total * 0.5
    };
    if n_multi == 0 {
        between = &total * 0.5;
    }
    let ridge = (1e-6 * total.trace() / d as f64).max(1e-12);
    if !linalg::is_positive_definite(&within) {
        warnings.push(format!("PLDA: initial within covariance singular, added ridge {ridge:e}"));
        within = linalg::add_ridge(&within, ridge);
    }
    if !linalg::is_positive_definite(&between) {
        between = linalg::add_ridge(&between, ridge);
    }
    (mu, linalg::symmetrize(between), linalg::symmetrize(within))
}

/// Maximum-likelihood two-covariance PLDA by expectation-maximization.
pub fn fit_plda_em(set: &EmbeddingSet, iterations: usize) -> Result<PldaFit> {
    if iterations == 0 {
        return invalid("PLDA EM needs at least one iteration");
    }
    let stats = TrainingStats::new(set)?;
    if stats.speakers.len() < 2 {
        return invalid(format!(
            "PLDA training needs at least 2 speakers, found {}",
            stats.speakers.len()
        ));
    }
    let mut warnings = Vec::new();
    let (mut mu, mut b, mut w) = initial_params(&stats, &mut warnings);
    let d = stats.dim;
    let n_spk = stats.speakers.len() as f64;
    let n_total = stats.n_total as f64;

    let compute_terms = |b: &DMatrix<f64>, w: &DMatrix<f64>| -> Result<BTreeMap<usize, CountTerms>> {
        stats.counts.iter().map(|&n| Ok((n, count_terms(b, w, n)?))).collect()
    };
    let mut terms = compute_terms(&b, &w)?;
    let mut lls = vec![log_likelihood(&stats, &mu, &w, &terms)?];
    for it in 0..iterations {
        let mut mu_new = DVector::zeros(d);
        let mut second = DMatrix::zeros(d, d);
        let mut w_acc = stats.within_scatter.clone();
        let posts: Vec<DVector<f64>> = stats
            .speakers
            .iter()
            .map(|s| &mu + &terms[&s.n].gain * (&s.mean - &mu))
            .collect();
        for (s, m) in stats.speakers.iter().zip(&posts) {
            let t = &terms[&s.n];
            mu_new += m;
            second += &t.post_cov;
            second.ger(1.0, m, m, 1.0);
            let r = &s.mean - m;
            let n = s.n as f64;
            w_acc.ger(n, &r, &r, 1.0);
            w_acc += &t.post_cov * n;
        }
        mu_new /= n_spk;
        let mut b_new = second / n_spk;
        b_new.ger(-1.0, &mu_new, &mu_new, 1.0);
        let mut b_new = linalg::symmetrize(b_new);
        let mut w_new = linalg::symmetrize(w_acc / n_total);
        let ridge = (1e-10 * (b_new.trace() + w_new.trace()) / d as f64).max(1e-300);
        if !linalg::is_positive_definite(&w_new) {
            warnings.push(format!("PLDA: iteration {} within covariance degenerate, added ridge {ridge:e}", it + 1));
            w_new = linalg::add_ridge(&w_new, ridge);
        }
        let (bvals, _) = linalg::sym_eigen(&b_new);
        if bvals.iter().any(|&v| v < 0.0) {
            // clip tiny negative eigenvalues from round-off
            let (vals, vecs) = linalg::sym_eigen(&b_new);
            let clipped = DMatrix::from_diagonal(&vals.map(|v| v.max(0.0)));
            b_new = linalg::symmetrize(&vecs * clipped * vecs.transpose());
        }
        mu = mu_new;
        b = b_new;
        w = w_new;
        terms = compute_terms(&b, &w)?;
        let ll = log_likelihood(&stats, &mu, &w, &terms)?;
        let prev = *lls.last().unwrap();
        if ll < prev - 1e-8 * prev.abs().max(1.0) {
            warnings.push(format!(
                "PLDA: log-likelihood decreased at iteration {} ({prev} -> {ll})",
                it + 1
            ));
        }
        lls.push(ll);
    }
    Ok(PldaFit {
        model: PldaModel::new(mu, b, w)?,
        log_likelihoods: lls,
        warnings,
    })
}

/// Fits PLDA on an in-domain set and interpolates toward it: the mean and
/// between-speaker covariance use `between_weight`, the within-speaker
/// covariance `within_weight`.
pub fn adapt_plda(
    m: &PldaModel,
    adaptation: &EmbeddingSet,
    iterations: usize,
    within_weight: f64,
    between_weight: f64,
) -> Result<PldaFit> {
    if adaptation.dim() != m.dim() {
        return Err(Error::DimMismatch {
            expected: m.dim(),
            got: adaptation.dim(),
        });
    }
    let fit = fit_plda_em(adaptation, iterations)?;
    let model = interpolate_parts(m, &fit.model, between_weight, between_weight, within_weight)?;
    Ok(PldaFit { model, ..fit })
}
