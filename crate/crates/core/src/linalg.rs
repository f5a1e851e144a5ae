//! Small shared linear-algebra helpers for symmetric matrices.
//!
//! Everything here operates on covariances of modest dimension (parameter and
//! observation blocks, at most a few tens of rows), so dense factorizations
//! are always appropriate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{CoreError, Result};

/// Relative tolerance below which a negative eigenvalue is treated as
/// round-off and clipped to zero.
pub(crate) const EIG_CLIP_REL: f64 = 1e-10;

/// Cholesky-factor a symmetric positive definite matrix.
pub(crate) fn spd_cholesky(m: &DMatrix<f64>, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or(CoreError::SingularCovariance { context })
}

/// log det of an SPD matrix via its Cholesky factor.
pub(crate) fn logdet_spd(m: &DMatrix<f64>, context: &'static str) -> Result<f64> {
    let chol = spd_cholesky(m, context)?;
    Ok(chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum())
}

/// Quadratic form r' M^-1 r for SPD `m`.
pub(crate) fn inv_quadratic(
    m: &DMatrix<f64>,
    r: &DVector<f64>,
    context: &'static str,
) -> Result<f64> {
    let chol = spd_cholesky(m, context)?;
    Ok(r.dot(&chol.solve(r)))
}

/// Symmetric eigendecomposition with the crate's clipping rule: eigenvalues in
/// `[-tol, 0)` are clipped to zero, anything below `-tol` is an error. The
/// tolerance is `EIG_CLIP_REL * max(trace, 1)`.
pub(crate) fn clipped_symmetric_eigen(
    m: &DMatrix<f64>,
    context: &'static str,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let eig = m.clone().symmetric_eigen();
    let tol = EIG_CLIP_REL * m.trace().abs().max(1.0);
    let mut values = eig.eigenvalues;
    for v in values.iter_mut() {
        if *v < -tol {
            return Err(CoreError::FactorizationFailure {
                context,
                reason: format!("eigenvalue {v:.3e} below clip tolerance {tol:.3e}"),
            });
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok((values, eig.eigenvectors))
}

/// Factor L of a PSD matrix with M = L L'; small negative eigenvalues are
/// clipped, genuinely negative ones fail.
pub(crate) fn psd_factor(m: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    let (values, vectors) = clipped_symmetric_eigen(m, context)?;
    let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| vectors[(i, j)] * values[j].sqrt());
    Ok(scaled)
}

/// Principal square root of a PSD matrix.
pub(crate) fn psd_sqrt(m: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    let (values, vectors) = clipped_symmetric_eigen(m, context)?;
    let sqrt_vals = DVector::from_iterator(values.len(), values.iter().map(|v| v.sqrt()));
    Ok(&vectors * DMatrix::from_diagonal(&sqrt_vals) * vectors.transpose())
}

/// Solve M X = B for SPD `m`, retrying once with diagonal jitter
/// (1e-10 * trace) before giving up. Used for Kalman-gain solves where the
/// innovation covariance can be numerically semidefinite.
pub(crate) fn spd_solve_with_jitter(m: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol.solve(b));
    }
    let jitter = 1e-10 * m.trace().abs().max(1.0);
    let mut jittered = m.clone();
    for i in 0..m.nrows() {
        jittered[(i, i)] += jitter;
    }
    Cholesky::new(jittered)
        .map(|chol| chol.solve(b))
        .ok_or(CoreError::GainSolveFailure)
}

/// Max absolute difference between a matrix and its transpose.
pub(crate) fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut max = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            max = max.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    max
}
