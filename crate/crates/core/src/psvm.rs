//! Pairwise quadratic-form scorer initialized from PLDA and refined by
//! gradient descent on a smoothed detection cost.
//!
//! ```text
//! s = eᵀΛt + eᵀΓe + tᵀΓt + cᵀ(e+t) + k
//!     + u_sum·log(f_e+f_t) + u_diff·|log f_e − log f_t| + u_min·log(min(f_e,f_t))
//! ```
//!
//! `f` are frame counts. Both Λ and Γ are kept symmetric, so the score is
//! exactly symmetric in `(e, t)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backends::{PairScorer, PldaModel, Prepared};
use crate::error::{invalid, Error, Result};
use crate::model::{frames, EmbeddingSet, OperatingPoint};
use crate::pipeline::speaker_means;
use crate::Fitted;

#[derive(Debug, Clone, PartialEq)]
pub struct PsvmModel {
    /// Λ, symmetric.
    pub cross: DMatrix<f64>,
    /// Γ, symmetric.
    pub quadratic: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub bias: f64,
    /// `(u_sum, u_diff, u_min)`.
    pub duration_weights: [f64; 3],
}

fn symmetric_within(m: &DMatrix<f64>, tol: f64) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= tol * scale
}

impl PsvmModel {
    pub fn new(
        cross: DMatrix<f64>,
        quadratic: DMatrix<f64>,
        linear: DVector<f64>,
        bias: f64,
        duration_weights: [f64; 3],
    ) -> Result<Self> {
        let d = linear.len();
        for (what, m) in [("cross", &cross), ("quadratic", &quadratic)] {
            if m.shape() != (d, d) {
                return invalid(format!("{what} matrix is {:?}, expected {d}x{d}", m.shape()));
            }
            if !symmetric_within(m, 1e-9) {
                return invalid(format!("{what} matrix is not symmetric"));
            }
        }
        let finite = cross.iter().chain(quadratic.iter()).chain(linear.iter()).all(|v| v.is_finite())
            && bias.is_finite()
            && duration_weights.iter().all(|v| v.is_finite());
        if !finite {
            return invalid("PSVM parameters must be finite");
        }
        Ok(Self {
            cross: (&cross + cross.transpose()) * 0.5,
            quadratic: (&quadratic + quadratic.transpose()) * 0.5,
            linear,
            bias,
            duration_weights,
        })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            cross: DMatrix::zeros(dim, dim),
            quadratic: DMatrix::zeros(dim, dim),
            linear: DVector::zeros(dim),
            bias: 0.0,
            duration_weights: [0.0; 3],
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn n_params(&self) -> usize {
        n_params(self.dim())
    }

    /// Flat parameter vector: upper triangle of Λ, upper triangle of Γ, c, k, u.
    pub fn to_params(&self) -> Vec<f64> {
        let d = self.dim();
        let mut p = Vec::with_capacity(self.n_params());
        for m in [&self.cross, &self.quadratic] {
            for i in 0..d {
                for j in i..d {
                    p.push(m[(i, j)]);
                }
            }
        }
        p.extend(self.linear.iter());
        p.push(self.bias);
        p.extend(self.duration_weights);
        p
    }

    pub fn from_params(dim: usize, p: &[f64]) -> Result<Self> {
        if p.len() != n_params(dim) {
            return invalid(format!("{} parameters for dimension {dim}, expected {}", p.len(), n_params(dim)));
        }
        let mut it = p.iter().copied();
        let mut sym = || {
            let mut m = DMatrix::zeros(dim, dim);
            for i in 0..dim {
                for j in i..dim {
                    let v = it.next().expect("length checked");
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            m
        };
        let cross = sym();
        let quadratic = sym();
        let rest = &p[dim * (dim + 1)..];
        Ok(Self {
            cross,
            quadratic,
            linear: DVector::from_column_slice(&rest[..dim]),
            bias: rest[dim],
            duration_weights: [rest[dim + 1], rest[dim + 2], rest[dim + 3]],
        })
    }
}

fn n_params(d: usize) -> usize {
    d * (d + 1) + d + 4
}

/// `(log(f_e+f_t), |log f_e − log f_t|, log min(f_e,f_t))`.
pub fn duration_features(frames_e: f64, frames_t: f64) -> [f64; 3] {
    let (le, lt) = (frames_e.ln(), frames_t.ln());
    [(frames_e + frames_t).ln(), (le - lt).abs(), frames_e.min(frames_t).ln()]
}

fn duration_term(u: &[f64; 3], phi: [f64; 3]) -> f64 {
    u[0] * phi[0] + u[1] * phi[1] + u[2] * phi[2]
}

/// Scores one pair; durations are `(enrollment seconds, probe seconds)`.
pub fn score_psvm(m: &PsvmModel, e: &[f64], t: &[f64], durations: Option<(f64, f64)>) -> Result<f64> {
    for x in [e, t] {
        if x.len() != m.dim() {
            return Err(Error::DimMismatch {
                expected: m.dim(),
                got: x.len(),
            });
        }
    }
    let e = DVector::from_column_slice(e);
    let t = DVector::from_column_slice(t);
    let cross = 0.5 * (e.dot(&(&m.cross * &t)) + t.dot(&(&m.cross * &e)));
    let qe = e.dot(&(&m.quadratic * &e));
    let qt = t.dot(&(&m.quadratic * &t));
    let lin = m.linear.dot(&(&e + &t));
    let dur = match durations {
        Some((de, dt)) => {
            if !(de > 0.0 && dt > 0.0) {
                return invalid("durations must be positive");
            }
            duration_term(&m.duration_weights, duration_features(frames(de), frames(dt)))
        }
        None => 0.0,
    };
    Ok(cross + (qe + qt) + lin + m.bias + dur)
}

/// Expands the PLDA log-likelihood ratio around its mean into PSVM form.
pub fn init_psvm_from_plda(m: &PldaModel) -> Result<PsvmModel> {
    let s = m.scoring()?;
    let q = &s.half_q * 2.0;
    let mu = &s.mean;
    let qp = &q + &s.p;
    let linear = -(&qp * mu);
    let bias = s.constant + mu.dot(&(&qp * mu));
    PsvmModel::new(s.p.clone(), s.half_q.clone(), linear, bias, [0.0; 3])
}

impl PairScorer for PsvmModel {
    fn dim(&self) -> usize {
        self.linear.len()
    }

    fn prepare_enroll(&self, x: &[f64], frames: Option<f64>) -> Prepared {
        let v = DVector::from_column_slice(x);
        let q = v.dot(&(&self.quadratic * &v)) + self.linear.dot(&v);
        Prepared {
            v: (&self.cross * v).as_slice().to_vec(),
            q,
            frames,
        }
    }

    fn prepare_probe(&self, x: &[f64], frames: Option<f64>) -> Prepared {
        let v = DVector::from_column_slice(x);
        let q = v.dot(&(&self.quadratic * &v)) + self.linear.dot(&v);
        Prepared {
            v: x.to_vec(),
            q,
            frames,
        }
    }

    fn score_prepared(&self, e: &Prepared, t: &Prepared) -> f64 {
        let cross: f64 = e.v.iter().zip(&t.v).map(|(a, b)| a * b).sum();
        let dur = match (e.frames, t.frames) {
            (Some(fe), Some(ft)) => duration_term(&self.duration_weights, duration_features(fe, ft)),
            _ => 0.0,
        };
        cross + (e.q + t.q) + self.bias + dur
    }
}

/// Cosine similarity between speaker-mean embeddings.
#[derive(Debug, Clone)]
pub struct SpeakerSimilarity {
    pub speakers: Vec<String>,
    pub matrix: DMatrix<f64>,
}

impl SpeakerSimilarity {
    pub fn from_set(set: &EmbeddingSet) -> Result<Self> {
        let means = speaker_means(set)?;
        let speakers: Vec<String> = means.keys().cloned().collect();
        let units: Vec<DVector<f64>> = means
            .values()
            .map(|m| {
                let v = DVector::from_column_slice(m);
                let n = v.norm();
                if n > 0.0 {
                    v / n
                } else {
                    v
                }
            })
            .collect();
        let n = units.len();
        let matrix = DMatrix::from_fn(n, n, |i, j| units[i].dot(&units[j]));
        Ok(Self { speakers, matrix })
    }
}

/// One training pair of segment ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub a: String,
    pub b: String,
    pub same: bool,
}

pub type PairList = Vec<Pair>;

#[derive(Debug, Clone, Copy)]
pub struct MiningConfig {
    pub n_same: usize,
    pub n_impostor: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            n_same: 16,
            n_impostor: 240,
            seed: 0,
        }
    }
}

/// Per speaker: up to `n_same` random same-speaker utterance pairs and one
/// impostor pair with each of the `n_impostor` most similar other speakers.
pub fn mine_pairs(set: &EmbeddingSet, similarity: &SpeakerSimilarity, cfg: &MiningConfig) -> Result<Fitted<PairList>> {
    let groups = set.speakers()?;
    if groups.len() < 2 {
        return invalid(format!("pair mining needs at least 2 speakers, got {}", groups.len()));
    }
    let order: Vec<(&String, &Vec<usize>)> = groups.iter().collect();
    let sim_index: std::collections::HashMap<&str, usize> =
        similarity.speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut sim_rows = Vec::with_capacity(order.len());
    for (spk, _) in &order {
        sim_rows.push(
            *sim_index
                .get(spk.as_str())
                .ok_or_else(|| Error::Invalid(format!("speaker '{spk}' missing from similarity matrix")))?,
        );
    }
    let ids = |i: usize| set.records()[i].segment_id.clone();
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for (si, (spk, utts)) in order.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(si as u64);
        let u = utts.len();
        if u < 2 {
            warnings.push(format!("speaker '{spk}' has {u} utterance(s); no same-speaker pairs"));
        } else {
            let total = u * (u - 1) / 2;
            let k = cfg.n_same.min(total);
            let mut chosen = index::sample(&mut rng, total, k).into_vec();
            chosen.sort_unstable();
            for c in chosen {
                let (i, j) = unrank_pair(c, u);
                pairs.push(Pair {
                    a: ids(utts[i]),
                    b: ids(utts[j]),
                    same: true,
                });
            }
        }
        let row = sim_rows[si];
        let mut others: Vec<usize> = (0..order.len()).filter(|&o| o != si).collect();
        others.sort_by(|&x, &y| {
            similarity.matrix[(row, sim_rows[y])]
                .total_cmp(&similarity.matrix[(row, sim_rows[x])])
                .then(x.cmp(&y))
        });
        for &o in others.iter().take(cfg.n_impostor) {
            let mine = utts[rng.random_range(0..u)];
            let theirs = order[o].1[rng.random_range(0..order[o].1.len())];
            pairs.push(Pair {
                a: ids(mine),
                b: ids(theirs),
                same: false,
            });
        }
    }
    Ok(Fitted { value: pairs, warnings })
}

/// Maps `0..n(n−1)/2` to the pair `(i, j)`, `i < j`, in row-major order.
fn unrank_pair(mut r: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    while r >= n - 1 - i {
        r -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + r)
}

/// Pair embeddings as row matrices with duration features and labels.
#[derive(Debug, Clone)]
pub struct PairData {
    pub e: DMatrix<f64>,
    pub t: DMatrix<f64>,
    /// `n × 3` duration features, zero when durations are unavailable.
    pub phi: DMatrix<f64>,
    pub same: Vec<bool>,
}

impl PairData {
    pub fn new(e: DMatrix<f64>, t: DMatrix<f64>, phi: Option<DMatrix<f64>>, same: Vec<bool>) -> Result<Self> {
        let n = same.len();
        if e.nrows() != n || t.nrows() != n || e.ncols() != t.ncols() {
            return invalid("pair matrices have inconsistent shapes");
        }
        let phi = phi.unwrap_or_else(|| DMatrix::zeros(n, 3));
        if phi.shape() != (n, 3) {
            return invalid("duration features must be n x 3");
        }
        Ok(Self { e, t, phi, same })
    }

    /// Looks pairs up in `set`; duration features are used when the set has durations.
    pub fn from_pairs(pairs: &[Pair], set: &EmbeddingSet) -> Result<Self> {
        let n = pairs.len();
        let d = set.dim();
        let mut e = DMatrix::zeros(n, d);
        let mut t = DMatrix::zeros(n, d);
        let with_dur = set.durations().is_some();
        let mut phi = DMatrix::zeros(n, 3);
        for (r, p) in pairs.iter().enumerate() {
            if !p.same && p.a == p.b {
                return invalid(format!("different-speaker pair pairs '{}' with itself", p.a));
            }
            for (m, id) in [(&mut e, &p.a), (&mut t, &p.b)] {
                let x = set.get(id).ok_or_else(|| Error::Invalid(format!("no embedding for segment '{id}'")))?;
                for (c, v) in x.vector.iter().enumerate() {
                    m[(r, c)] = *v;
                }
            }
            if with_dur {
                let f = |id: &str| set.duration(id).map(frames);
                if let (Some(fa), Some(fb)) = (f(&p.a), f(&p.b)) {
                    let v = duration_features(fa, fb);
                    for c in 0..3 {
                        phi[(r, c)] = v[c];
                    }
                }
            }
        }
        Self::new(e, t, Some(phi), pairs.iter().map(|p| p.same).collect())
    }

    pub fn len(&self) -> usize {
        self.same.len()
    }

    pub fn is_empty(&self) -> bool {
        self.same.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.e.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            e: self.e.select_rows(rows),
            t: self.t.select_rows(rows),
            phi: self.phi.select_rows(rows),
            same: rows.iter().map(|&r| self.same[r]).collect(),
        }
    }

    /// Scores of all pairs under `m`.
    pub fn scores(&self, m: &PsvmModel) -> Result<Vec<f64>> {
        check_model(m, self)?;
        Ok(chunk_scores(m, self, 0, self.len()))
    }
}

fn check_model(m: &PsvmModel, data: &PairData) -> Result<()> {
    if m.dim() != data.dim() {
        return Err(Error::DimMismatch {
            expected: m.dim(),
            got: data.dim(),
        });
    }
    Ok(())
}

const CHUNK: usize = 2048;

fn chunk_scores(m: &PsvmModel, data: &PairData, r0: usize, n: usize) -> Vec<f64> {
    let e = data.e.rows(r0, n);
    let t = data.t.rows(r0, n);
    let el = &e * &m.cross;
    let eg = &e * &m.quadratic;
    let tg = &t * &m.quadratic;
    let u = DVector::from_column_slice(&m.duration_weights);
    let dur = data.phi.rows(r0, n) * u;
    let lin = (&e + &t) * &m.linear;
    (0..n)
        .map(|i| {
            let cross = el.row(i).dot(&t.row(i));
            let qe = eg.row(i).dot(&e.row(i));
            let qt = tg.row(i).dot(&t.row(i));
            cross + (qe + qt) + lin[i] + m.bias + dur[i]
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct LossSetup {
    thresholds: Vec<f64>,
    miss_weight: Vec<f64>,
    fa_weight: Vec<f64>,
    tau: f64,
}

fn loss_setup(data: &PairData, ops: &[OperatingPoint], tau: f64) -> Result<LossSetup> {
    if !(tau > 0.0 && tau.is_finite()) {
        return invalid(format!("temperature must be positive, got {tau}"));
    }
    if ops.is_empty() {
        return invalid("no operating points");
    }
    let ns = data.same.iter().filter(|&&s| s).count();
    let nd = data.len() - ns;
    if ns == 0 || nd == 0 {
        return invalid(format!("pair list needs both labels: {ns} same, {nd} different"));
    }
    let k = ops.len() as f64;
    Ok(LossSetup {
        thresholds: ops.iter().map(|o| o.bayes_threshold()).collect(),
        miss_weight: ops.iter().map(|o| o.p_target * o.c_miss / (o.normalizer() * ns as f64 * k)).collect(),
        fa_weight: ops
            .iter()
            .map(|o| (1.0 - o.p_target) * o.c_fa / (o.normalizer() * nd as f64 * k))
            .collect(),
        tau,
    })
}

impl LossSetup {
    /// Loss contribution of one pair and its derivative with respect to the score.
    fn pair(&self, s: f64, same: bool) -> (f64, f64) {
        let mut l = 0.0;
        let mut g = 0.0;
        for (o, &th) in self.thresholds.iter().enumerate() {
            if same {
                let z = (th - s) / self.tau;
                let sg = sigmoid(z);
                l += self.miss_weight[o] * sg;
                g -= self.miss_weight[o] * sg * (1.0 - sg) / self.tau;
            } else {
                let z = (s - th) / self.tau;
                let sg = sigmoid(z);
                l += self.fa_weight[o] * sg;
                g += self.fa_weight[o] * sg * (1.0 - sg) / self.tau;
            }
        }
        (l, g)
    }
}

/// Mean over operating points of the normalized DCF with sigmoid-smoothed
/// miss and false-alarm rates at the Bayes threshold.
pub fn smoothed_dcf_loss(m: &PsvmModel, data: &PairData, ops: &[OperatingPoint], tau: f64) -> Result<f64> {
    check_model(m, data)?;
    let setup = loss_setup(data, ops, tau)?;
    let parts: Vec<f64> = chunks(data.len())
        .into_par_iter()
        .map(|(r0, n)| {
            chunk_scores(m, data, r0, n)
                .iter()
                .enumerate()
                .map(|(i, &s)| setup.pair(s, data.same[r0 + i]).0)
                .sum()
        })
        .collect();
    Ok(parts.iter().sum())
}

fn chunks(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(CHUNK)).map(|c| (c * CHUNK, CHUNK.min(n - c * CHUNK))).collect()
}

struct Grad {
    loss: f64,
    cross: DMatrix<f64>,
    quadratic: DMatrix<f64>,
    linear: DVector<f64>,
    bias: f64,
    dur: DVector<f64>,
}

fn chunk_grad(m: &PsvmModel, data: &PairData, setup: &LossSetup, r0: usize, n: usize) -> Grad {
    let s = chunk_scores(m, data, r0, n);
    let mut loss = 0.0;
    let mut g = DVector::zeros(n);
    for i in 0..n {
        let (l, d) = setup.pair(s[i], data.same[r0 + i]);
        loss += l;
        g[i] = d;
    }
    let e = data.e.rows(r0, n);
    let t = data.t.rows(r0, n);
    let mut ge = e.clone_owned();
    let mut gt = t.clone_owned();
    for i in 0..n {
        ge.row_mut(i).scale_mut(g[i]);
        gt.row_mut(i).scale_mut(g[i]);
    }
    Grad {
        loss,
        cross: ge.transpose() * t,
        quadratic: ge.transpose() * e + gt.transpose() * t,
        linear: (&e + &t).transpose() * &g,
        bias: g.sum(),
        dur: data.phi.rows(r0, n).transpose() * &g,
    }
}

/// Loss and gradient with respect to [`PsvmModel::to_params`].
pub fn smoothed_dcf_loss_and_gradient(
    m: &PsvmModel,
    data: &PairData,
    ops: &[OperatingPoint],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    check_model(m, data)?;
    let setup = loss_setup(data, ops, tau)?;
    let d = m.dim();
    let parts: Vec<Grad> = chunks(data.len())
        .into_par_iter()
        .map(|(r0, n)| chunk_grad(m, data, &setup, r0, n))
        .collect();
    let mut acc = Grad {
        loss: 0.0,
        cross: DMatrix::zeros(d, d),
        quadratic: DMatrix::zeros(d, d),
        linear: DVector::zeros(d),
        bias: 0.0,
        dur: DVector::zeros(3),
    };
    for p in parts {
        acc.loss += p.loss;
        acc.cross += p.cross;
        acc.quadratic += p.quadratic;
        acc.linear += p.linear;
        acc.bias += p.bias;
        acc.dur += p.dur;
    }
    let mut grad = Vec::with_capacity(m.n_params());
    for full in [&acc.cross, &acc.quadratic] {
        for i in 0..d {
            grad.push(full[(i, i)]);
            for j in i + 1..d {
                grad.push(full[(i, j)] + full[(j, i)]);
            }
        }
    }
    // to_params walks rows i, columns j ≥ i; the loop above matches that order
    grad.extend(acc.linear.iter());
    grad.push(acc.bias);
    grad.extend(acc.dur.iter());
    Ok((acc.loss, grad))
}

#[derive(Debug, Clone)]
pub struct RefineConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4096,
            epochs: 50,
            temperature: 1.0,
            momentum: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Refined {
    pub model: PsvmModel,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Full-set loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch gradient descent on the smoothed loss. The returned model is
/// the one with the lowest full-set loss seen, so it is never worse than the
/// initialization.
pub fn refine_psvm(m: &PsvmModel, data: &PairData, ops: &[OperatingPoint], cfg: &RefineConfig) -> Result<Refined> {
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return invalid("learning rate must be nonnegative");
    }
    if cfg.batch_size == 0 {
        return invalid("batch size must be positive");
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return invalid("momentum must lie in [0,1)");
    }
    let tau = cfg.temperature;
    let d = m.dim();
    let initial_loss = smoothed_dcf_loss(m, data, ops, tau)?;
    let mut best = (initial_loss, m.clone());
    let mut params = m.to_params();
    let mut velocity = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let n = data.len();
    let full_batch = cfg.batch_size >= n;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if !full_batch {
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
        }
        for batch in order.chunks(cfg.batch_size) {
            let model = PsvmModel::from_params(d, &params)?;
            let sub;
            let view = if full_batch {
                data
            } else {
                sub = data.select(batch);
                &sub
            };
            // a batch holding a single label has no defined loss; skip it
            if view.same.iter().all(|&s| s) || view.same.iter().all(|&s| !s) {
                continue;
            }
            let (_, grad) = smoothed_dcf_loss_and_gradient(&model, view, ops, tau)?;
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *p += *v;
            }
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical(format!("PSVM refinement diverged in epoch {epoch}")));
        }
        let model = PsvmModel::from_params(d, &params)?;
        let loss = smoothed_dcf_loss(&model, data, ops, tau)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("PSVM training loss is {loss} in epoch {epoch}")));
        }
        epoch_losses.push(loss);
        if loss < best.0 {
            best = (loss, model);
        }
    }
    Ok(Refined {
        model: best.1,
        initial_loss,
        final_loss: best.0,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::score_plda;
    use crate::model::{Embedding, PRIMARY_OPERATING_POINTS};

    fn plda1() -> PldaModel {
        PldaModel::new(
            DVector::from_element(1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn trivial_scores() {
        let z = PsvmModel::zeros(2);
        assert_eq!(score_psvm(&z, &[1.0, 2.0], &[3.0, -1.0], Some((3.0, 5.0))).unwrap(), 0.0);
        let mut m = PsvmModel::zeros(2);
        m.cross = DMatrix::identity(2, 2);
        assert_eq!(score_psvm(&m, &[0.6, 0.8], &[0.6, 0.8], None).unwrap(), 1.0);
        assert!(score_psvm(&m, &[1.0], &[1.0, 0.0], None).is_err());
    }

    #[test]
    fn symmetric_with_durations() {
        let m = PsvmModel::new(
            DMatrix::from_row_slice(2, 2, &[0.3, -0.7, -0.7, 1.1]),
            DMatrix::from_row_slice(2, 2, &[-0.2, 0.05, 0.05, -0.4]),
            DVector::from_column_slice(&[0.1, -0.3]),
            0.25,
            [0.4, -0.6, 0.2],
        )
        .unwrap();
        let (e, t) = ([0.37, -1.3], [2.1, 0.9]);
        let a = score_psvm(&m, &e, &t, Some((12.3, 41.0))).unwrap();
        let b = score_psvm(&m, &t, &e, Some((41.0, 12.3))).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn init_matches_plda_dim1() {
        let p = init_psvm_from_plda(&plda1()).unwrap();
        let s = score_psvm(&p, &[0.0], &[0.0], None).unwrap();
        assert!((s + 0.5 * (0.75f64).ln()).abs() < 1e-12);
        let m = PldaModel::new(
            DVector::from_element(1, 0.7),
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 0.5),
        )
        .unwrap();
        let p = init_psvm_from_plda(&m).unwrap();
        for (e, t) in [(0.0, 1.0), (-2.0, 3.5), (0.7, 0.7)] {
            let a = score_psvm(&p, &[e], &[t], None).unwrap();
            let b = score_plda(&m, &[&[e]], &[t]).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} {b}");
        }
    }

    #[test]
    fn zero_between_gives_zero_model() {
        let m = PldaModel::new(DVector::zeros(2), DMatrix::zeros(2, 2), DMatrix::identity(2, 2)).unwrap();
        let p = init_psvm_from_plda(&m).unwrap();
        assert!(p.to_params().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn params_round_trip() {
        let m = PsvmModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]),
            DMatrix::from_row_slice(2, 2, &[4.0, 5.0, 5.0, 6.0]),
            DVector::from_column_slice(&[7.0, 8.0]),
            9.0,
            [10.0, 11.0, 12.0],
        )
        .unwrap();
        let p = m.to_params();
        assert_eq!(p, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        assert_eq!(PsvmModel::from_params(2, &p).unwrap(), m);
    }

    #[test]
    fn unrank_covers_all_pairs() {
        let n = 5;
        let got: Vec<_> = (0..n * (n - 1) / 2).map(|r| unrank_pair(r, n)).collect();
        let mut want = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                want.push((i, j));
            }
        }
        assert_eq!(got, want);
    }

    fn labeled(spk_utts: &[usize]) -> EmbeddingSet {
        let mut recs = Vec::new();
        let mut labels = std::collections::HashMap::new();
        for (s, &u) in spk_utts.iter().enumerate() {
            for k in 0..u {
                let id = format!("s{s}u{k}");
                recs.push(Embedding::new(id.clone(), vec![s as f64 + 1.0, k as f64 * 0.1]));
                labels.insert(id, format!("spk{s}"));
            }
        }
        EmbeddingSet::new(2, recs).unwrap().with_labels(labels).unwrap()
    }

    #[test]
    fn mining_examples() {
        let set = labeled(&[3, 4]);
        let sim = SpeakerSimilarity::from_set(&set).unwrap();
        let cfg = MiningConfig::default();
        let pairs = mine_pairs(&set, &sim, &cfg).unwrap().value;
        assert_eq!(pairs.iter().filter(|p| !p.same).count(), 2);
        assert_eq!(pairs.iter().filter(|p| p.same).count(), 3 + 6);
        assert_eq!(mine_pairs(&set, &sim, &cfg).unwrap().value, pairs);

        let single = labeled(&[1, 3]);
        let sim = SpeakerSimilarity::from_set(&single).unwrap();
        let out = mine_pairs(&single, &sim, &cfg).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(out.value.iter().filter(|p| p.same).all(|p| p.a.starts_with("s1")));

        let one = labeled(&[4]);
        let sim = SpeakerSimilarity::from_set(&one).unwrap();
        assert!(mine_pairs(&one, &sim, &cfg).is_err());
    }

    #[test]
    fn loss_at_threshold_is_half() {
        let op = OperatingPoint::unit_cost(0.01).unwrap();
        let th = op.bayes_threshold();
        let mut m = PsvmModel::zeros(1);
        m.bias = th;
        let data = PairData::new(
            DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            DMatrix::from_column_slice(2, 1, &[0.5, -1.0]),
            None,
            vec![true, false],
        )
        .unwrap();
        let l = smoothed_dcf_loss(&m, &data, &[op], 1.0).unwrap();
        assert!((l - 0.5 * (0.01 + 0.99) / 0.01).abs() < 1e-12);
        let two = smoothed_dcf_loss(&m, &data, &PRIMARY_OPERATING_POINTS, 1.0).unwrap();
        let a = smoothed_dcf_loss(&m, &data, &PRIMARY_OPERATING_POINTS[..1], 1.0).unwrap();
        let b = smoothed_dcf_loss(&m, &data, &PRIMARY_OPERATING_POINTS[1..], 1.0).unwrap();
        assert!((two - 0.5 * (a + b)).abs() < 1e-12);
        let single = PairData::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), None, vec![true]).unwrap();
        assert!(smoothed_dcf_loss(&m, &single, &[op], 1.0).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_model() {
        let m = init_psvm_from_plda(&plda1()).unwrap();
        let data = PairData::new(
            DMatrix::from_column_slice(4, 1, &[1.0, 2.0, -1.0, 0.3]),
            DMatrix::from_column_slice(4, 1, &[1.1, -1.0, -0.8, 2.0]),
            None,
            vec![true, false, true, false],
        )
        .unwrap();
        let cfg = RefineConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..RefineConfig::default()
        };
        let r = refine_psvm(&m, &data, &PRIMARY_OPERATING_POINTS, &cfg).unwrap();
        assert_eq!(r.model, m);
        assert_eq!(r.final_loss, r.initial_loss);
    }
}
