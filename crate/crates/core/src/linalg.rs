//! Small dense helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub(crate) fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m)).ok_or_else(|| Error::Domain(format!("{what} is not positive definite")))
}

/// Symmetric square root `U diag(sqrt(k)) U'` of a symmetric PD matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sym_power(m, 0.5)
}

/// Inverse square root `U diag(1/sqrt(k)) U'`, built from the eigendecomposition.
pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sym_power(m, -0.5)
}

fn sym_power(m: &DMatrix<f64>, power: f64) -> Result<DMatrix<f64>> {
    let eig = symmetrize(m).symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&k| !(k > scale * 1e-14)) {
        return Err(Error::Domain("matrix is not positive definite".into()));
    }
    let u = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|k| k.powf(power)));
    Ok(symmetrize(&(u * d * u.transpose())))
}

/// Inverse and log-determinant of a symmetric PD matrix via Cholesky.
pub(crate) fn spd_inverse_logdet(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let chol = cholesky(m, what)?;
    let logdet = chol.ln_determinant();
    Ok((symmetrize(&chol.inverse()), logdet))
}
