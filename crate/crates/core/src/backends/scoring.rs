//! Batch trial scoring shared by all back-ends.
//!
//! Each side of a trial is reduced once to a [`Prepared`] record so that the
//! per-trial work is a single dot product. Trials are scored data-parallel
//! and written by index, so results do not depend on the thread count.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::model::{frames, EmbeddingSet, EnrollmentManifest, ScoreSet, Trial};

/// One side of a trial after scorer-specific preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub v: Vec<f64>,
    pub q: f64,
    pub frames: Option<f64>,
}

pub trait PairScorer: Sync {
    fn dim(&self) -> usize;
    fn prepare_enroll(&self, x: &[f64], frames: Option<f64>) -> Prepared;
    fn prepare_probe(&self, x: &[f64], frames: Option<f64>) -> Prepared;
    fn score_prepared(&self, enroll: &Prepared, probe: &Prepared) -> f64;
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean of one or more vectors of dimension `dim`.
pub fn average(vectors: &[&[f64]], dim: usize) -> Result<Vec<f64>> {
    if vectors.is_empty() {
        return invalid("enrollment has no segments");
    }
    let mut out = vec![0.0; dim];
    for v in vectors {
        if v.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        for (a, b) in out.iter_mut().zip(v.iter()) {
            *a += b;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|a| *a /= n);
    Ok(out)
}

/// Cosine similarity scorer.
#[derive(Debug, Clone, Copy)]
pub struct CosineScorer {
    pub dim: usize,
}

fn unit(x: &[f64]) -> Vec<f64> {
    let n = dot(x, x).sqrt();
    if n > 0.0 {
        x.iter().map(|v| v / n).collect()
    } else {
        vec![f64::NAN; x.len()]
    }
}

impl PairScorer for CosineScorer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn prepare_enroll(&self, x: &[f64], _frames: Option<f64>) -> Prepared {
        Prepared {
            v: unit(x),
            q: 0.0,
            frames: None,
        }
    }

    fn prepare_probe(&self, x: &[f64], frames: Option<f64>) -> Prepared {
        self.prepare_enroll(x, frames)
    }

    fn score_prepared(&self, e: &Prepared, t: &Prepared) -> f64 {
        dot(&e.v, &t.v).clamp(-1.0, 1.0)
    }
}

/// `dot(e,t) / (‖e‖‖t‖)`.
pub fn score_cosine(e: &[f64], t: &[f64]) -> Result<f64> {
    if e.len() != t.len() {
        return Err(Error::DimMismatch {
            expected: e.len(),
            got: t.len(),
        });
    }
    let ne = dot(e, e).sqrt();
    let nt = dot(t, t).sqrt();
    if !(ne > 0.0 && nt > 0.0) {
        return invalid("cosine score of a zero vector");
    }
    Ok((dot(e, t) / (ne * nt)).clamp(-1.0, 1.0))
}

/// Averaged enrollment vectors (and summed-duration frame counts) for a set of models.
pub fn model_vectors(
    enroll: &EmbeddingSet,
    manifest: &EnrollmentManifest,
    model_ids: &[&str],
) -> Result<Vec<(Vec<f64>, Option<f64>)>> {
    model_ids
        .iter()
        .map(|m| {
            let segs = manifest.segments(m);
            let mut vecs = Vec::with_capacity(segs.len());
            let mut secs = Some(0.0);
            for s in &segs {
                let e = enroll.get(s).ok_or_else(|| {
                    Error::Invalid(format!("no embedding for enrollment segment '{s}' of model '{m}'"))
                })?;
                vecs.push(e.vector.as_slice());
                secs = match (secs, enroll.duration(s)) {
                    (Some(a), Some(d)) => Some(a + d),
                    _ => None,
                };
            }
            Ok((average(&vecs, enroll.dim())?, secs.map(frames)))
        })
        .collect()
}

fn check_dim(scorer: &(impl PairScorer + ?Sized), set: &EmbeddingSet) -> Result<()> {
    if set.dim() != scorer.dim() {
        return Err(Error::DimMismatch {
            expected: scorer.dim(),
            got: set.dim(),
        });
    }
    Ok(())
}

fn unique<'a>(ids: impl Iterator<Item = &'a str>) -> (Vec<&'a str>, HashMap<&'a str, usize>) {
    let mut order = Vec::new();
    let mut index = HashMap::new();
    for id in ids {
        index.entry(id).or_insert_with(|| {
            order.push(id);
            order.len() - 1
        });
    }
    (order, index)
}

fn prepare_models<S: PairScorer + ?Sized>(
    scorer: &S,
    enroll: &EmbeddingSet,
    manifest: &EnrollmentManifest,
    ids: &[&str],
) -> Result<Vec<Prepared>> {
    let vecs = model_vectors(enroll, manifest, ids)?;
    Ok(vecs.par_iter().map(|(v, f)| scorer.prepare_enroll(v, *f)).collect())
}

fn prepare_probes<S: PairScorer + ?Sized>(scorer: &S, probe: &EmbeddingSet, ids: &[&str]) -> Result<Vec<Prepared>> {
    ids.par_iter()
        .map(|s| {
            let e = probe
                .get(s)
                .ok_or_else(|| Error::Invalid(format!("no embedding for probe segment '{s}'")))?;
            Ok(scorer.prepare_probe(&e.vector, probe.duration(s).map(frames)))
        })
        .collect()
}

/// Scores every trial. Enrollment models are resolved through the manifest
/// and averaged; frame counts come from the sets' durations when present.
pub fn score_trials<S: PairScorer + ?Sized>(
    scorer: &S,
    enroll: &EmbeddingSet,
    probe: &EmbeddingSet,
    manifest: &EnrollmentManifest,
    trials: &[Trial],
) -> Result<ScoreSet> {
    check_dim(scorer, enroll)?;
    check_dim(scorer, probe)?;
    let (models, model_index) = unique(trials.iter().map(|t| t.model_id.as_str()));
    let (segs, seg_index) = unique(trials.iter().map(|t| t.segment_id.as_str()));
    let pm = prepare_models(scorer, enroll, manifest, &models)?;
    let ps = prepare_probes(scorer, probe, &segs)?;
    let scores: Vec<f64> = trials
        .par_iter()
        .map(|t| scorer.score_prepared(&pm[model_index[t.model_id.as_str()]], &ps[seg_index[t.segment_id.as_str()]]))
        .collect();
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("non-finite score for trial {}", trials[i])));
    }
    ScoreSet::new(trials.to_vec(), scores)
}

/// Per-model and per-segment score lists against a cohort, for S-norm style
/// normalization. Models are scored against cohort segments as probes;
/// probe segments against cohort segments as enrollments.
pub struct CohortScores {
    pub enroll: HashMap<String, Vec<f64>>,
    pub probe: HashMap<String, Vec<f64>>,
}

pub fn cohort_scores<S: PairScorer + ?Sized>(
    scorer: &S,
    enroll: &EmbeddingSet,
    probe: &EmbeddingSet,
    manifest: &EnrollmentManifest,
    trials: &[Trial],
    cohort: &EmbeddingSet,
) -> Result<CohortScores> {
    check_dim(scorer, cohort)?;
    if cohort.is_empty() {
        return invalid("cohort set is empty");
    }
    let (models, _) = unique(trials.iter().map(|t| t.model_id.as_str()));
    let (segs, _) = unique(trials.iter().map(|t| t.segment_id.as_str()));
    let pm = prepare_models(scorer, enroll, manifest, &models)?;
    let ps = prepare_probes(scorer, probe, &segs)?;
    let cohort_as_probe: Vec<Prepared> = cohort
        .records()
        .par_iter()
        .map(|r| scorer.prepare_probe(&r.vector, cohort.duration(&r.segment_id).map(frames)))
        .collect();
    let cohort_as_enroll: Vec<Prepared> = cohort
        .records()
        .par_iter()
        .map(|r| scorer.prepare_enroll(&r.vector, cohort.duration(&r.segment_id).map(frames)))
        .collect();
    let enroll_lists: Vec<Vec<f64>> = pm
        .par_iter()
        .map(|m| cohort_as_probe.iter().map(|c| scorer.score_prepared(m, c)).collect())
        .collect();
    let probe_lists: Vec<Vec<f64>> = ps
        .par_iter()
        .map(|p| cohort_as_enroll.iter().map(|c| scorer.score_prepared(c, p)).collect())
        .collect();
    Ok(CohortScores {
        enroll: models.iter().map(|m| m.to_string()).zip(enroll_lists).collect(),
        probe: segs.iter().map(|s| s.to_string()).zip(probe_lists).collect(),
    })
}
