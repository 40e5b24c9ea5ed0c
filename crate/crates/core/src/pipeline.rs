//! Embedding preprocessing: centering, whitening, LDA, CORAL, length
//! normalization and multi-system stacking.
//!
//! Fitted stages are affine maps `x' = A·x + b` and compose into one
//! [`LinearTransform`]; length normalization is the only nonlinear stage.
//! The usual order is center → CORAL → whiten → LDA → length-normalize,
//! each stage optional.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::model::{Embedding, EmbeddingSet};
use crate::Fitted;

/// Affine map `x' = A·x + b` with `A` of shape `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTransform {
    matrix: DMatrix<f64>,
    offset: DVector<f64>,
}

impl LinearTransform {
    pub fn new(matrix: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        if matrix.nrows() != offset.len() {
            return Err(Error::DimMismatch {
                expected: matrix.nrows(),
                got: offset.len(),
            });
        }
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return invalid("transform dimensions must be positive");
        }
        if matrix.iter().chain(offset.iter()).any(|v| !v.is_finite()) {
            return invalid("transform has non-finite entries");
        }
        Ok(Self { matrix, offset })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
            offset: DVector::zeros(dim),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &LinearTransform) -> Result<LinearTransform> {
        if next.in_dim() != self.out_dim() {
            return Err(Error::DimMismatch {
                expected: self.out_dim(),
                got: next.in_dim(),
            });
        }
        LinearTransform::new(
            &next.matrix * &self.matrix,
            &next.matrix * &self.offset + &next.offset,
        )
    }

    pub fn apply_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::DimMismatch {
                expected: self.in_dim(),
                got: x.len(),
            });
        }
        let v = &self.matrix * DVector::from_column_slice(x) + &self.offset;
        Ok(v.as_slice().to_vec())
    }
}

/// Applies `t` to every record; labels, domains and durations carry through.
pub fn apply_transform(t: &LinearTransform, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    if set.dim() != t.in_dim() {
        return Err(Error::DimMismatch {
            expected: t.in_dim(),
            got: set.dim(),
        });
    }
    let vectors: Vec<Vec<f64>> = set
        .records()
        .par_iter()
        .map(|r| t.apply_vec(&r.vector))
        .collect::<Result<_>>()?;
    set.replace_vectors(t.out_dim(), vectors)
}

fn require_nonempty(set: &EmbeddingSet, what: &str) -> Result<()> {
    if set.is_empty() {
        return invalid(format!("{what}: embedding set is empty"));
    }
    Ok(())
}

/// Mean subtraction.
pub fn fit_center(set: &EmbeddingSet) -> Result<LinearTransform> {
    require_nonempty(set, "center")?;
    let (mean, _) = linalg::mean_and_covariance(&set.to_matrix());
    LinearTransform::new(DMatrix::identity(set.dim(), set.dim()), -mean)
}

/// Symmetric whitening `(Σ + ridge·I)^{-1/2}`; no offset.
pub fn fit_whitener(set: &EmbeddingSet, ridge: f64) -> Result<LinearTransform> {
    require_nonempty(set, "whitener")?;
    if !(ridge >= 0.0) {
        return invalid(format!("ridge must be nonnegative, got {ridge}"));
    }
    let (_, cov) = linalg::mean_and_covariance(&set.to_matrix());
    let a = linalg::sym_inv_sqrt(&linalg::add_ridge(&cov, ridge))
        .map_err(|e| Error::Numerical(format!("whitener covariance after ridge {ridge}: {e}")))?;
    LinearTransform::new(a, DVector::zeros(set.dim()))
}

/// Result of [`fit_lda`].
#[derive(Debug, Clone)]
pub struct Lda {
    pub transform: LinearTransform,
    /// Generalized eigenvalues of the retained directions, descending.
    pub eigenvalues: Vec<f64>,
}

const LDA_RIDGE_FACTOR: f64 = 1e-6;
const LDA_DEGENERATE_EIGENVALUE: f64 = 1e-9;

/// Linear discriminant analysis to `out_dim` dimensions.
///
/// Rows of the returned matrix solve `S_b v = λ S_w v` ordered by decreasing
/// `λ` and are scaled so the projected within-class covariance is identity.
/// `S_w` receives a ridge of `1e-6·trace(S_w)/dim` before inversion.
pub fn fit_lda(set: &EmbeddingSet, out_dim: usize) -> Result<Fitted<Lda>> {
    let groups = set.speakers()?;
    let n_classes = groups.len();
    if n_classes < 2 {
        return invalid(format!("LDA needs at least 2 classes, found {n_classes}"));
    }
    let max_dim = set.dim().min(n_classes - 1);
    if out_dim == 0 || out_dim > max_dim {
        return invalid(format!(
            "LDA output dimension {out_dim} outside 1..={max_dim} (dim {}, {n_classes} classes)",
            set.dim()
        ));
    }
    let d = set.dim();
    let n = set.len() as f64;
    let x = set.to_matrix();
    let global = x.row_mean().transpose();
    let mut sw = DMatrix::zeros(d, d);
    let mut sb = DMatrix::zeros(d, d);
    for idx in groups.values() {
        let mut mean = DVector::zeros(d);
        for &i in idx {
            mean += x.row(i).transpose();
        }
        mean /= idx.len() as f64;
        for &i in idx {
            let c = x.row(i).transpose() - &mean;
            sw.ger(1.0, &c, &c, 1.0);
        }
        let m = &mean - &global;
        sb.ger(idx.len() as f64, &m, &m, 1.0);
    }
    sw /= n;
    sb /= n;
    let ridge = (LDA_RIDGE_FACTOR * sw.trace() / d as f64).max(f64::MIN_POSITIVE);
    let sw_isqrt = linalg::sym_inv_sqrt(&linalg::add_ridge(&sw, ridge))?;
    let (vals, vecs) = linalg::sym_eigen(&(&sw_isqrt * &sb * &sw_isqrt));
    let directions = &sw_isqrt * vecs.columns(0, out_dim);
    let eigenvalues: Vec<f64> = vals.iter().take(out_dim).copied().collect();
    let mut warnings = Vec::new();
    let degenerate = eigenvalues.iter().filter(|&&l| l < LDA_DEGENERATE_EIGENVALUE).count();
    if degenerate > 0 {
        warnings.push(format!(
            "LDA: {degenerate} of {out_dim} directions have near-zero between-class variance (class means nearly identical)"
        ));
    }
    let transform = LinearTransform::new(directions.transpose(), DVector::zeros(out_dim))?;
    Ok(Fitted {
        value: Lda {
            transform,
            eigenvalues,
        },
        warnings,
    })
}

/// Projects onto the unit sphere.
pub fn length_normalize(e: &Embedding) -> Result<Embedding> {
    let norm = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return invalid(format!("cannot length-normalize zero vector '{}'", e.segment_id));
    }
    Ok(Embedding::new(
        e.segment_id.clone(),
        e.vector.iter().map(|v| v / norm).collect(),
    ))
}

pub fn length_normalize_set(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let vectors = set
        .records()
        .par_iter()
        .map(|r| length_normalize(r).map(|e| e.vector))
        .collect::<Result<Vec<_>>>()?;
    set.replace_vectors(set.dim(), vectors)
}

fn covariance_with_fallback(set: &EmbeddingSet, what: &str, warnings: &mut Vec<String>) -> Result<DMatrix<f64>> {
    let (_, cov) = linalg::mean_and_covariance(&set.to_matrix());
    if linalg::sym_inv_sqrt(&cov).is_ok() {
        return Ok(cov);
    }
    let ridge = (1e-6 * cov.trace() / cov.nrows() as f64).max(1e-12);
    warnings.push(format!("CORAL: {what} covariance is rank deficient, added ridge {ridge:e}"));
    Ok(linalg::add_ridge(&cov, ridge))
}

/// CORAL map `Σ_blend^{1/2} · Σ_out^{-1/2}` with `Σ_blend = (1−w)·Σ_out + w·Σ_in`.
///
/// Rank-deficient covariances get a ridge of `1e-6·trace/dim` and a warning.
pub fn fit_coral(out_domain: &EmbeddingSet, in_domain: &EmbeddingSet, w: f64) -> Result<Fitted<LinearTransform>> {
    require_nonempty(out_domain, "CORAL out-of-domain")?;
    require_nonempty(in_domain, "CORAL in-domain")?;
    if out_domain.dim() != in_domain.dim() {
        return Err(Error::DimMismatch {
            expected: out_domain.dim(),
            got: in_domain.dim(),
        });
    }
    if !(0.0..=1.0).contains(&w) {
        return invalid(format!("CORAL weight must lie in [0,1], got {w}"));
    }
    let mut warnings = Vec::new();
    let s_out = covariance_with_fallback(out_domain, "out-of-domain", &mut warnings)?;
    let s_in = covariance_with_fallback(in_domain, "in-domain", &mut warnings)?;
    let blend = &s_out * (1.0 - w) + &s_in * w;
    let t = linalg::sym_sqrt(&blend)? * linalg::sym_inv_sqrt(&s_out)?;
    Ok(Fitted {
        value: LinearTransform::new(t, DVector::zeros(out_domain.dim()))?,
        warnings,
    })
}

/// Concatenates per-segment vectors across systems in list order. Record
/// order and metadata follow the first set.
pub fn stack_embeddings(sets: &[&EmbeddingSet]) -> Result<EmbeddingSet> {
    let first = match sets.first() {
        Some(f) => *f,
        None => return invalid("nothing to stack"),
    };
    for (k, s) in sets.iter().enumerate().skip(1) {
        let missing: Vec<&str> = first
            .records()
            .iter()
            .filter(|r| s.position(&r.segment_id).is_none())
            .map(|r| r.segment_id.as_str())
            .chain(
                s.records()
                    .iter()
                    .filter(|r| first.position(&r.segment_id).is_none())
                    .map(|r| r.segment_id.as_str()),
            )
            .collect();
        if !missing.is_empty() {
            let shown: Vec<&str> = missing.iter().take(5).copied().collect();
            return invalid(format!(
                "set {k} does not share the segment inventory of set 0: {} mismatched ids ({}{})",
                missing.len(),
                shown.join(", "),
                if missing.len() > 5 { ", ..." } else { "" }
            ));
        }
    }
    let dim: usize = sets.iter().map(|s| s.dim()).sum();
    let vectors = first
        .records()
        .iter()
        .map(|r| {
            let mut v = Vec::with_capacity(dim);
            for s in sets {
                v.extend_from_slice(&s.get(&r.segment_id).expect("checked above").vector);
            }
            v
        })
        .collect();
    first.replace_vectors(dim, vectors)
}

/// Pipeline configuration. Stages run in the fixed order
/// center → CORAL → whiten → LDA → length-normalize.
#[derive(Debug, Clone, Default)]
pub struct PipelineConfig {
    pub center: bool,
    /// CORAL blend weight toward the in-domain set, if enabled.
    pub coral_weight: Option<f64>,
    pub whiten_ridge: Option<f64>,
    pub lda_dim: Option<usize>,
    pub length_normalize: bool,
}

/// Fitted affine part of a pipeline plus the trailing length-normalization flag.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub transform: LinearTransform,
    pub length_normalize: bool,
}

impl Pipeline {
    pub fn apply(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        let out = apply_transform(&self.transform, set)?;
        if self.length_normalize {
            length_normalize_set(&out)
        } else {
            Ok(out)
        }
    }
}

/// Fits each enabled stage on the output of the previous one.
pub fn fit_pipeline(
    train: &EmbeddingSet,
    in_domain: Option<&EmbeddingSet>,
    cfg: &PipelineConfig,
) -> Result<Fitted<Pipeline>> {
    let mut warnings = Vec::new();
    let mut total = LinearTransform::identity(train.dim());
    let mut current = train.clone();
    let mut in_current = in_domain.cloned();
    let push = |t: LinearTransform, current: &mut EmbeddingSet, in_current: &mut Option<EmbeddingSet>, total: &mut LinearTransform| -> Result<()> {
        *current = apply_transform(&t, current)?;
        if let Some(s) = in_current.as_mut() {
            *s = apply_transform(&t, s)?;
        }
        *total = total.then(&t)?;
        Ok(())
    };
    if cfg.center {
        let t = fit_center(&current)?;
        push(t, &mut current, &mut in_current, &mut total)?;
    }
    if let Some(w) = cfg.coral_weight {
        let ind = in_current
            .as_ref()
            .ok_or_else(|| Error::Invalid("CORAL requires an in-domain embedding set".into()))?;
        let fit = fit_coral(&current, ind, w)?;
        warnings.extend(fit.warnings);
        push(fit.value, &mut current, &mut in_current, &mut total)?;
    }
    if let Some(r) = cfg.whiten_ridge {
        let t = fit_whitener(&current, r)?;
        push(t, &mut current, &mut in_current, &mut total)?;
    }
    if let Some(k) = cfg.lda_dim {
        let fit = fit_lda(&current, k)?;
        warnings.extend(fit.warnings);
        push(fit.value.transform, &mut current, &mut in_current, &mut total)?;
    }
    Ok(Fitted {
        value: Pipeline {
            transform: total,
            length_normalize: cfg.length_normalize,
        },
        warnings,
    })
}

/// Speaker-mean embeddings, speakers in sorted order.
pub fn speaker_means(set: &EmbeddingSet) -> Result<BTreeMap<String, Vec<f64>>> {
    let groups = set.speakers()?;
    let mut out = BTreeMap::new();
    for (spk, idx) in groups {
        let mut m = vec![0.0; set.dim()];
        for &i in &idx {
            for (a, b) in m.iter_mut().zip(&set.records()[i].vector) {
                *a += b;
            }
        }
        let n = idx.len() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        out.insert(spk, m);
    }
    Ok(out)
}

/// Labels map helper for tests and generators.
pub fn labels_from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> HashMap<String, String> {
    pairs.into_iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_from(rows: &[&[f64]]) -> EmbeddingSet {
        let d = rows[0].len();
        EmbeddingSet::new(
            d,
            rows.iter()
                .enumerate()
                .map(|(i, r)| Embedding::new(format!("s{i}"), r.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn center_examples() {
        let s = set_from(&[&[1.0, 1.0], &[3.0, 3.0]]);
        let t = fit_center(&s).unwrap();
        assert_eq!(t.offset().as_slice(), &[-2.0, -2.0]);
        let one = set_from(&[&[0.3, -7.0]]);
        let t = fit_center(&one).unwrap();
        assert!(t.apply_vec(&[0.3, -7.0]).unwrap().iter().all(|v| v.abs() < 1e-15));
        let centered = set_from(&[&[1.0, -2.0], &[-1.0, 2.0]]);
        assert!(fit_center(&centered).unwrap().offset().iter().all(|v| v.abs() < 1e-12));
        assert!(fit_center(&EmbeddingSet::new(2, vec![]).unwrap()).is_err());
    }

    #[test]
    fn whitener_one_dimensional_scale() {
        // variance 4
        let s = set_from(&[&[2.0], &[-2.0], &[2.0], &[-2.0]]);
        let t = fit_whitener(&s, 0.0).unwrap();
        assert!((t.matrix()[(0, 0)] - 0.5).abs() < 1e-12);
        let flat = set_from(&[&[1.0], &[1.0]]);
        assert!(fit_whitener(&flat, 0.0).is_err());
        assert!(fit_whitener(&flat, 1.0).is_ok());
    }

    #[test]
    fn whitener_identity_covariance_gives_identity() {
        let s = set_from(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]);
        // covariance diag(0.5, 0.5); scale it to identity
        let s = apply_transform(
            &LinearTransform::new(DMatrix::identity(2, 2) * 2f64.sqrt(), DVector::zeros(2)).unwrap(),
            &s,
        )
        .unwrap();
        let t = fit_whitener(&s, 0.0).unwrap();
        assert!((t.matrix() - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn length_normalize_examples() {
        let e = length_normalize(&Embedding::new("a", vec![3.0, 4.0])).unwrap();
        assert!((e.vector[0] - 0.6).abs() < 1e-15 && (e.vector[1] - 0.8).abs() < 1e-15);
        let u = length_normalize(&Embedding::new("a", vec![0.0, 1.0])).unwrap();
        assert_eq!(u.vector, vec![0.0, 1.0]);
        assert!(length_normalize(&Embedding::new("a", vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn lda_rank_bounds_and_degenerate_warning() {
        let s = set_from(&[&[0.0, 1.0], &[0.0, -1.0], &[0.0, 1.0], &[0.0, -1.0]])
            .with_labels(labels_from_pairs([("s0", "a"), ("s1", "a"), ("s2", "b"), ("s3", "b")]))
            .unwrap();
        assert!(fit_lda(&s, 2).is_err());
        assert!(fit_lda(&s, 0).is_err());
        let fit = fit_lda(&s, 1).unwrap();
        assert!(fit.value.eigenvalues[0].abs() < 1e-9);
        assert_eq!(fit.warnings.len(), 1);
    }

    #[test]
    fn coral_identity_cases() {
        let a = set_from(&[&[1.0, 0.5], &[-1.0, 0.2], &[0.3, -0.9], &[0.1, 0.4]]);
        let b = set_from(&[&[5.0, 0.0], &[-5.0, 0.0], &[0.0, 0.1], &[0.0, -0.1]]);
        let same = fit_coral(&a, &a, 1.0).unwrap().value;
        assert!((same.matrix() - DMatrix::identity(2, 2)).norm() < 1e-10);
        let zero = fit_coral(&a, &b, 0.0).unwrap().value;
        assert!((zero.matrix() - DMatrix::identity(2, 2)).norm() < 1e-10);
        assert!(fit_coral(&a, &b, 1.5).is_err());
    }

    #[test]
    fn stack_examples() {
        let a = set_from(&[&[1.0], &[2.0]]);
        let b = set_from(&[&[10.0, 20.0], &[30.0, 40.0]]);
        let s = stack_embeddings(&[&a, &b]).unwrap();
        assert_eq!(s.dim(), 3);
        assert_eq!(s.get("s1").unwrap().vector, vec![2.0, 30.0, 40.0]);
        assert_eq!(stack_embeddings(&[&a]).unwrap(), a);
        let c = set_from(&[&[1.0]]);
        let e = stack_embeddings(&[&a, &c]).unwrap_err();
        assert!(e.to_string().contains("s1"), "{e}");
    }

    #[test]
    fn zero_matrix_gives_offset() {
        let s = set_from(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let t = LinearTransform::new(DMatrix::zeros(1, 2), DVector::from_vec(vec![7.0])).unwrap();
        let out = apply_transform(&t, &s).unwrap();
        assert!(out.records().iter().all(|r| r.vector == vec![7.0]));
    }
}
