//! Small dense linear-algebra helpers over nalgebra.
//!
//! Eigen-decompositions are returned with eigenvalues in descending order and
//! each eigenvector's largest-magnitude component made nonnegative, so every
//! derived quantity is deterministic.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Row mean and population covariance (divided by n) of the rows of `x`.
pub fn mean_and_covariance(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / n;
    (mean, symmetrize(cov))
}

pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition with the ordering and sign conventions above.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m.clone()));
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(k, &col);
    }
    (values, vectors)
}

fn spectral_map(m: &DMatrix<f64>, what: &str, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let (values, vectors) = sym_eigen(m);
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    if let Some(v) = values.iter().find(|&&v| v <= scale * 1e-14) {
        return Err(Error::Numerical(format!(
            "{what}: matrix is not positive definite (eigenvalue {v:e})"
        )));
    }
    let mapped = DMatrix::from_diagonal(&values.map(f));
    Ok(symmetrize(&vectors * mapped * vectors.transpose()))
}

/// Symmetric square root of a positive definite matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spectral_map(m, "square root", f64::sqrt)
}

/// Symmetric inverse square root of a positive definite matrix.
pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spectral_map(m, "inverse square root", |v| 1.0 / v.sqrt())
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m.clone()))
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(cholesky(m, what)?.inverse()))
}

pub fn log_det_spd(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let c = cholesky(m, what)?;
    Ok(2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// `m + ridge·I`.
pub fn add_ridge(m: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let mut out = m.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += ridge;
    }
    out
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    Cholesky::new(symmetrize(m.clone())).is_some()
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}
