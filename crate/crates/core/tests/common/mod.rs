#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vbackend::model::{Embedding, EmbeddingSet, EnrollmentManifest, OperatingPoint, ScoreSet, Trial, TrialKey, TrialLabel};

/// Threshold-enumeration oracle: every midpoint between adjacent distinct
/// scores plus one threshold below and one above all scores.
pub struct BruteForce {
    pub points: Vec<(f64, f64)>,
}

pub fn brute_force(scores: &[f64], labels: &[TrialLabel]) -> BruteForce {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mut thresholds = vec![distinct[0] - 1.0];
    for w in distinct.windows(2) {
        thresholds.push(0.5 * (w[0] + w[1]));
    }
    thresholds.push(distinct[distinct.len() - 1] + 1.0);
    let nt = labels.iter().filter(|l| l.is_target()).count();
    let nn = labels.len() - nt;
    let points = thresholds
        .iter()
        .map(|&th| {
            let mut miss = 0usize;
            let mut fa = 0usize;
            for (s, l) in scores.iter().zip(labels) {
                if l.is_target() && *s < th {
                    miss += 1;
                }
                if !l.is_target() && *s >= th {
                    fa += 1;
                }
            }
            (miss as f64 / nt as f64, fa as f64 / nn as f64)
        })
        .collect();
    BruteForce { points }
}

pub fn oracle_dcf(op: &OperatingPoint, p_miss: f64, p_fa: f64) -> f64 {
    (op.p_target * op.c_miss * p_miss + (1.0 - op.p_target) * op.c_fa * p_fa) / op.normalizer()
}

impl BruteForce {
    pub fn min_dcf(&self, op: &OperatingPoint) -> f64 {
        self.points
            .iter()
            .map(|&(m, f)| oracle_dcf(op, m, f))
            .fold(f64::INFINITY, f64::min)
    }

    /// Crossing of the piecewise-linear (Pfa, Pmiss) path with Pmiss = Pfa.
    pub fn eer(&self) -> f64 {
        for w in self.points.windows(2) {
            let (m0, f0) = w[0];
            let (m1, f1) = w[1];
            if m1 >= f1 {
                if m0 >= f0 {
                    return m0;
                }
                if m1 == f1 {
                    return m1;
                }
                let t = (f0 - m0) / ((m1 - m0) - (f1 - f0));
                return m0 + t * (m1 - m0);
            }
        }
        unreachable!("last point has Pmiss = 1")
    }
}

pub fn oracle_act_dcf(scores: &[f64], labels: &[TrialLabel], op: &OperatingPoint) -> f64 {
    let th = ((1.0 - op.p_target) * op.c_fa / (op.p_target * op.c_miss)).ln();
    let nt = labels.iter().filter(|l| l.is_target()).count();
    let nn = labels.len() - nt;
    let miss = scores.iter().zip(labels).filter(|(s, l)| l.is_target() && **s < th).count();
    let fa = scores.iter().zip(labels).filter(|(s, l)| !l.is_target() && **s >= th).count();
    oracle_dcf(op, miss as f64 / nt as f64, fa as f64 / nn as f64)
}

/// Random labeled scores with both classes; `ties` quantizes to force equal scores.
pub fn random_scores(rng: &mut ChaCha8Rng, n: usize, ties: bool) -> (Vec<f64>, Vec<TrialLabel>) {
    loop {
        let shift = rng.random_range(0.0..4.0);
        let p = rng.random_range(0.05..0.95);
        let mut scores = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let tgt = rng.random::<f64>() < p;
            let z: f64 = StandardNormal.sample(rng);
            let mut s = z * 2.0 + if tgt { shift } else { 0.0 } + 3.0;
            if ties {
                s = (s * 2.0).round() / 2.0;
            }
            scores.push(s);
            labels.push(if tgt { TrialLabel::Target } else { TrialLabel::Nontarget });
        }
        if labels.iter().any(|l| l.is_target()) && labels.iter().any(|l| !l.is_target()) {
            return (scores, labels);
        }
    }
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_vec(r, c, normal_vec(rng, r * c))
}

/// Random SPD matrix `A·Aᵀ/d + floor·I`.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, floor: f64) -> DMatrix<f64> {
    let a = random_matrix(rng, d, d);
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * floor
}

/// Labeled corpus from a general two-covariance model.
pub fn gaussian_corpus(
    rng: &mut ChaCha8Rng,
    mu: &DVector<f64>,
    b: &DMatrix<f64>,
    w: &DMatrix<f64>,
    n_spk: usize,
    utts: usize,
) -> EmbeddingSet {
    let d = mu.len();
    let lb = b.clone().cholesky().map(|c| c.l()).unwrap_or_else(|| DMatrix::zeros(d, d));
    let lw = w.clone().cholesky().unwrap().l();
    let mut recs = Vec::new();
    let mut labels = HashMap::new();
    for s in 0..n_spk {
        let y = mu + &lb * DVector::from_vec(normal_vec(rng, d));
        for u in 0..utts {
            let x = &y + &lw * DVector::from_vec(normal_vec(rng, d));
            let id = format!("g{s:04}_{u:03}");
            labels.insert(id.clone(), format!("g{s:04}"));
            recs.push(Embedding::new(id, x.as_slice().to_vec()));
        }
    }
    EmbeddingSet::new(d, recs).unwrap().with_labels(labels).unwrap()
}

/// Several "extractors" observing the same recordings: system `j` sees
/// `P_j·(speaker + session) + noise_j` with independent noise per system.
pub struct MultiSystem {
    pub systems: Vec<EmbeddingSet>,
}

pub fn multi_system_corpus(
    rng: &mut ChaCha8Rng,
    projections: &[DMatrix<f64>],
    n_spk: usize,
    utts: usize,
    session_sd: f64,
    noise_sd: f64,
    prefix: &str,
) -> MultiSystem {
    let k = projections[0].ncols();
    let mut recs: Vec<Vec<Embedding>> = vec![Vec::new(); projections.len()];
    let mut labels = HashMap::new();
    for s in 0..n_spk {
        let y = DVector::from_vec(normal_vec(rng, k));
        for u in 0..utts {
            let z = &y + DVector::from_vec(normal_vec(rng, k)) * session_sd;
            let id = format!("{prefix}{s:04}_{u:02}");
            labels.insert(id.clone(), format!("{prefix}{s:04}"));
            for (j, p) in projections.iter().enumerate() {
                let x = p * &z + DVector::from_vec(normal_vec(rng, p.nrows())) * noise_sd;
                recs[j].push(Embedding::new(id.clone(), x.as_slice().to_vec()));
            }
        }
    }
    MultiSystem {
        systems: recs
            .into_iter()
            .zip(projections)
            .map(|(r, p)| EmbeddingSet::new(p.nrows(), r).unwrap().with_labels(labels.clone()).unwrap())
            .collect(),
    }
}

// ---- proptest strategies for the file formats ----

pub fn id_strategy() -> impl Strategy<Value = String> {
    "[A-Za-z0-9_.:é-]{1,12}"
}

pub fn finite_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(-2.0),
    ]
}

pub fn trials_strategy() -> impl Strategy<Value = Vec<Trial>> {
    prop::collection::vec((id_strategy(), id_strategy()), 0..40)
        .prop_map(|v| v.into_iter().map(|(m, s)| Trial::new(m, s)).collect())
}

pub fn key_strategy() -> impl Strategy<Value = TrialKey> {
    (
        prop::collection::vec((id_strategy(), id_strategy(), any::<bool>(), id_strategy()), 0..40),
        any::<bool>(),
    )
        .prop_map(|(rows, with_part)| {
            let trials = rows.iter().map(|r| Trial::new(r.0.clone(), r.1.clone())).collect();
            let labels = rows
                .iter()
                .map(|r| if r.2 { TrialLabel::Target } else { TrialLabel::Nontarget })
                .collect();
            let parts = with_part.then(|| rows.iter().map(|r| r.3.clone()).collect());
            TrialKey::new(trials, labels, parts).unwrap()
        })
}

pub fn scores_strategy() -> impl Strategy<Value = ScoreSet> {
    prop::collection::vec((id_strategy(), id_strategy(), finite_f64()), 0..40).prop_map(|rows| {
        let trials = rows.iter().map(|r| Trial::new(r.0.clone(), r.1.clone())).collect();
        ScoreSet::new(trials, rows.iter().map(|r| r.2).collect()).unwrap()
    })
}

pub fn durations_strategy() -> impl Strategy<Value = HashMap<String, f64>> {
    prop::collection::hash_map(
        id_strategy(),
        prop_oneof![1e-3..1e4f64, (1e-300..1e300f64).prop_filter("positive", |v| *v > 0.0)],
        0..40,
    )
}

pub fn manifest_strategy() -> impl Strategy<Value = EnrollmentManifest> {
    prop::collection::btree_map(id_strategy(), prop::collection::btree_set(id_strategy(), 1..4), 0..20).prop_map(
        |m: BTreeMap<String, std::collections::BTreeSet<String>>| {
            EnrollmentManifest::new(m.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect()).unwrap()
        },
    )
}

pub fn embeddings_strategy() -> impl Strategy<Value = EmbeddingSet> {
    (1usize..6, prop::collection::hash_set(id_strategy(), 0..20), any::<(bool, bool)>()).prop_flat_map(
        |(dim, ids, (with_labels, with_durations))| {
            let ids: Vec<String> = ids.into_iter().collect();
            let n = ids.len();
            (
                Just(dim),
                Just(ids),
                prop::collection::vec(prop::collection::vec(finite_f64(), dim), n),
                prop::collection::vec(id_strategy(), n),
                prop::collection::vec(1e-3..1e4f64, n),
                Just((with_labels, with_durations)),
            )
                .prop_map(|(dim, ids, vecs, labels, durs, (wl, wd))| {
                    let recs = ids.iter().zip(vecs).map(|(i, v)| Embedding::new(i.clone(), v)).collect();
                    let mut set = EmbeddingSet::new(dim, recs).unwrap();
                    if wl {
                        set = set.with_labels(ids.iter().cloned().zip(labels).collect()).unwrap();
                    }
                    if wd {
                        set = set.with_durations(ids.iter().cloned().zip(durs).collect()).unwrap();
                    }
                    set
                })
        },
    )
}

/// Bitwise equality of embedding vectors (NaN payloads included).
pub fn same_bits(a: &EmbeddingSet, b: &EmbeddingSet) -> bool {
    a.dim() == b.dim()
        && a.len() == b.len()
        && a.records().iter().zip(b.records()).all(|(x, y)| {
            x.segment_id == y.segment_id
                && x.vector.iter().zip(&y.vector).all(|(p, q)| p.to_bits() == q.to_bits())
        })
        && a.labels() == b.labels()
        && a.durations().map(|m| {
            let mut v: Vec<_> = m.iter().map(|(k, d)| (k.clone(), d.to_bits())).collect();
            v.sort();
            v
        }) == b.durations().map(|m| {
            let mut v: Vec<_> = m.iter().map(|(k, d)| (k.clone(), d.to_bits())).collect();
            v.sort();
            v
        })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
