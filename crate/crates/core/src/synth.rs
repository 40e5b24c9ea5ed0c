//! Synthetic corpora from an isotropic two-covariance Gaussian model, with
//! log-normal durations, an optional domain shift, trial sampling and the
//! closed-form LLR of the generating model.

use std::collections::{HashMap, HashSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::model::{DurationInfo, Embedding, EmbeddingSet, ScoreSet, Trial, TrialKey, TrialLabel};

pub const IN_DOMAIN: &str = "in";
pub const SHIFTED_DOMAIN: &str = "shifted";

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub dim: usize,
    /// Speaker means ~ N(0, b·I).
    pub between_scale: f64,
    /// Utterances ~ N(mean, w·I).
    pub within_scale: f64,
    /// Added to every utterance of the shifted speakers.
    pub domain_shift: Option<Vec<f64>>,
    /// Fraction of speakers (the first ones by index) in the shifted domain.
    pub shifted_fraction: f64,
    pub duration_log_mean: f64,
    pub duration_log_sd: f64,
    /// Oracle scores get `+ probe_duration_bias·log(d_p)`.
    pub probe_duration_bias: f64,
    /// Oracle scores get `+ reference_duration_bias·log(d_r)`.
    pub reference_duration_bias: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 200,
            utts_per_speaker: 10,
            dim: 32,
            between_scale: 1.0,
            within_scale: 1.0,
            domain_shift: None,
            shifted_fraction: 0.5,
            duration_log_mean: 20f64.ln(),
            duration_log_sd: 0.7,
            probe_duration_bias: 0.0,
            reference_duration_bias: 0.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.utts_per_speaker == 0 || self.dim == 0 {
            return invalid("speaker, utterance and dimension counts must be at least 1");
        }
        if !(self.between_scale >= 0.0 && self.between_scale.is_finite()) {
            return invalid("between scale must be nonnegative");
        }
        if !(self.within_scale > 0.0 && self.within_scale.is_finite()) {
            return invalid("within scale must be positive");
        }
        if let Some(s) = &self.domain_shift {
            if s.len() != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    got: s.len(),
                });
            }
        }
        if !(0.0..=1.0).contains(&self.shifted_fraction) {
            return invalid("shifted fraction must lie in [0,1]");
        }
        if !(self.duration_log_mean.is_finite() && self.duration_log_sd >= 0.0 && self.duration_log_sd.is_finite()) {
            return invalid("invalid duration distribution");
        }
        Ok(())
    }

    fn n_shifted(&self) -> usize {
        if self.domain_shift.is_some() {
            (self.shifted_fraction * self.n_speakers as f64).round() as usize
        } else {
            0
        }
    }
}

pub fn speaker_id(i: usize) -> String {
    format!("spk{i:05}")
}

pub fn segment_id(speaker: usize, utt: usize) -> String {
    format!("spk{speaker:05}-{utt:04}")
}

struct SpeakerData {
    records: Vec<Embedding>,
    durations: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    let sd = scale.sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

/// Shift vector `N(0, scale·I)` drawn from its own stream of `seed`.
pub fn random_shift(dim: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    gaussian(&mut rng, dim, scale)
}

/// Labeled embeddings with durations and domains. Each speaker draws from
/// its own RNG stream, so output does not depend on the thread count.
pub fn make_corpus(spec: &CorpusSpec) -> Result<EmbeddingSet> {
    spec.validate()?;
    let dur = LogNormal::new(spec.duration_log_mean, spec.duration_log_sd)
        .map_err(|e| Error::Invalid(format!("duration distribution: {e}")))?;
    let n_shifted = spec.n_shifted();
    let speakers: Vec<SpeakerData> = (0..spec.n_speakers)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(s as u64);
            let mean = gaussian(&mut rng, spec.dim, spec.between_scale);
            let shift = spec.domain_shift.as_ref().filter(|_| s < n_shifted);
            let mut records = Vec::with_capacity(spec.utts_per_speaker);
            let mut durations = Vec::with_capacity(spec.utts_per_speaker);
            for u in 0..spec.utts_per_speaker {
                let mut x = gaussian(&mut rng, spec.dim, spec.within_scale);
                for (i, v) in x.iter_mut().enumerate() {
                    *v += mean[i] + shift.map_or(0.0, |sh| sh[i]);
                }
                records.push(Embedding::new(segment_id(s, u), x));
                durations.push(dur.sample(&mut rng));
            }
            SpeakerData { records, durations }
        })
        .collect();
    let mut labels = HashMap::new();
    let mut domains = HashMap::new();
    let mut durations = HashMap::new();
    let mut records = Vec::with_capacity(spec.n_speakers * spec.utts_per_speaker);
    for (s, sp) in speakers.into_iter().enumerate() {
        let domain = if s < n_shifted { SHIFTED_DOMAIN } else { IN_DOMAIN };
        for (r, d) in sp.records.into_iter().zip(sp.durations) {
            labels.insert(r.segment_id.clone(), speaker_id(s));
            domains.insert(r.segment_id.clone(), domain.to_string());
            durations.insert(r.segment_id.clone(), d);
            records.push(r);
        }
    }
    EmbeddingSet::new(spec.dim, records)?
        .with_labels(labels)?
        .with_domains(domains)?
        .with_durations(durations)
}

/// Samples distinct unordered segment pairs without replacement. Models are
/// single segments, so model ids are segment ids.
pub fn make_trials(set: &EmbeddingSet, n_target: usize, n_nontarget: usize, seed: u64) -> Result<TrialKey> {
    let groups = set.speakers()?;
    let n = set.len();
    let mut speaker_of = vec![0usize; n];
    for (k, idx) in groups.values().enumerate() {
        for &i in idx {
            speaker_of[i] = k;
        }
    }
    let all = n * n.saturating_sub(1) / 2;
    let avail_target: usize = groups.values().map(|v| v.len() * v.len().saturating_sub(1) / 2).sum();
    let avail_non = all - avail_target;
    if n_target > avail_target || n_nontarget > avail_non {
        return invalid(format!(
            "requested {n_target} target / {n_nontarget} nontarget trials, available {avail_target} / {avail_non}"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(usize, usize, bool)> = Vec::with_capacity(n_target + n_nontarget);

    // targets: rank within each speaker's pair block
    let blocks: Vec<&Vec<usize>> = groups.values().collect();
    let mut offsets = Vec::with_capacity(blocks.len());
    let mut acc = 0;
    for b in &blocks {
        offsets.push(acc);
        acc += b.len() * b.len().saturating_sub(1) / 2;
    }
    let mut chosen = index::sample(&mut rng, avail_target, n_target).into_vec();
    chosen.sort_unstable();
    for r in chosen {
        let k = offsets.partition_point(|&o| o <= r) - 1;
        let (i, j) = unrank(r - offsets[k], blocks[k].len());
        pairs.push((blocks[k][i], blocks[k][j], true));
    }

    if 2 * n_nontarget >= avail_non {
        let mut non = Vec::with_capacity(avail_non);
        for i in 0..n {
            for j in i + 1..n {
                if speaker_of[i] != speaker_of[j] {
                    non.push((i, j));
                }
            }
        }
        let mut idx = index::sample(&mut rng, non.len(), n_nontarget).into_vec();
        idx.sort_unstable();
        pairs.extend(idx.into_iter().map(|k| (non[k].0, non[k].1, false)));
    } else {
        let mut seen = HashSet::with_capacity(n_nontarget);
        let mut drawn = Vec::with_capacity(n_nontarget);
        while drawn.len() < n_nontarget {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a == b || speaker_of[a] == speaker_of[b] {
                continue;
            }
            let p = (a.min(b), a.max(b));
            if seen.insert(p) {
                drawn.push(p);
            }
        }
        pairs.extend(drawn.into_iter().map(|(a, b)| (a, b, false)));
    }

    for i in (1..pairs.len()).rev() {
        pairs.swap(i, rng.random_range(0..=i));
    }
    let id = |i: usize| set.records()[i].segment_id.clone();
    let mut trials = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for (a, b, tgt) in pairs {
        let (m, s) = if rng.random::<bool>() { (a, b) } else { (b, a) };
        trials.push(Trial::new(id(m), id(s)));
        labels.push(if tgt { TrialLabel::Target } else { TrialLabel::Nontarget });
    }
    TrialKey::new(trials, labels, None)
}

fn unrank(mut r: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    while r >= n - 1 - i {
        r -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + r)
}

/// Closed-form two-covariance LLR for `mu = 0, B = b·I, W = w·I`.
pub fn oracle_llr(spec: &CorpusSpec, e: &[f64], t: &[f64]) -> Result<f64> {
    isotropic_llr(spec.between_scale, spec.within_scale, e, t)
}

pub fn isotropic_llr(b: f64, w: f64, e: &[f64], t: &[f64]) -> Result<f64> {
    if !(w > 0.0 && b >= 0.0) {
        return invalid(format!("oracle LLR needs b ≥ 0 and w > 0, got b={b}, w={w}"));
    }
    if e.len() != t.len() {
        return Err(Error::DimMismatch {
            expected: e.len(),
            got: t.len(),
        });
    }
    let total = b + w;
    let cond = total - b * b / total;
    let q = 1.0 / total - 1.0 / cond;
    let p = b / (total * cond);
    let c = 0.5 * (total.ln() - cond.ln());
    Ok(e.iter()
        .zip(t)
        .map(|(x, y)| 0.5 * q * (x * x + y * y) + p * x * y + c)
        .sum())
}

/// Oracle LLR for every trial of `key`, plus the corpus duration-bias terms.
pub fn oracle_scores(spec: &CorpusSpec, set: &EmbeddingSet, trials: &[Trial]) -> Result<ScoreSet> {
    let biased = spec.probe_duration_bias != 0.0 || spec.reference_duration_bias != 0.0;
    let scores: Result<Vec<f64>> = trials
        .par_iter()
        .map(|tr| {
            let get = |id: &str| {
                set.get(id)
                    .ok_or_else(|| Error::Invalid(format!("no embedding for segment '{id}'")))
            };
            let s = oracle_llr(spec, &get(&tr.model_id)?.vector, &get(&tr.segment_id)?.vector)?;
            if !biased {
                return Ok(s);
            }
            let dur = |id: &str| {
                set.duration(id)
                    .ok_or_else(|| Error::Invalid(format!("no duration for segment '{id}'")))
            };
            let d = DurationInfo::new(dur(&tr.model_id)?, dur(&tr.segment_id)?)?;
            Ok(s + bias_term(spec.probe_duration_bias, spec.reference_duration_bias, &d))
        })
        .collect();
    ScoreSet::new(trials.to_vec(), scores?)
}

fn bias_term(alpha: f64, beta: f64, d: &DurationInfo) -> f64 {
    alpha * d.probe.ln() + beta * d.reference.ln()
}

/// `s + alpha·log(d_p) + beta·log(d_r)` per trial.
pub fn inject_duration_bias(scores: &ScoreSet, durations: &[DurationInfo], alpha: f64, beta: f64) -> Result<ScoreSet> {
    if durations.len() != scores.len() {
        return invalid("one duration pair per trial is required");
    }
    let out = scores
        .scores()
        .iter()
        .zip(durations)
        .map(|(s, d)| s + bias_term(alpha, beta, d))
        .collect();
    ScoreSet::new(scores.trials().to_vec(), out)
}
