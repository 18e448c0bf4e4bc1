//! Hermitian/symmetric solver helpers shared by the estimator, derivative
//! engine, and bound computations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative ridge applied to near-singular positive semidefinite matrices:
/// `eps = RIDGE_REL * trace / n`.
pub const RIDGE_REL: f64 = 1e-10;

/// Cached Cholesky factorization of a Hermitian positive (semi)definite
/// matrix, with a trace-scaled ridge fallback when the factorization fails.
pub struct HermitianSolver {
    chol: Cholesky<Complex64, Dyn>,
    /// Ridge actually applied, zero if the plain factorization succeeded.
    pub ridge: f64,
}

impl HermitianSolver {
    pub fn new(a: &DMatrix<Complex64>) -> Result<Self> {
        let n = a.nrows();
        if let Some(chol) = Cholesky::new(a.clone()) {
            return Ok(Self { chol, ridge: 0.0 });
        }
        let trace: f64 = (0..n).map(|i| a[(i, i)].re).sum();
        let base = RIDGE_REL * trace.abs().max(f64::MIN_POSITIVE) / n as f64;
        let mut ridge = base;
        for _ in 0..8 {
            let mut shifted = a.clone();
            for i in 0..n {
                shifted[(i, i)] += Complex64::new(ridge, 0.0);
            }
            if let Some(chol) = Cholesky::new(shifted) {
                return Ok(Self { chol, ridge });
            }
            ridge *= 100.0;
        }
        Err(Error::Numerical(
            "Hermitian factorization failed even with ridge".into(),
        ))
    }

    pub fn solve_vec(&self, b: &DVector<Complex64>) -> DVector<Complex64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<Complex64> {
        self.chol.inverse()
    }
}

/// Hermitian part `(a + a^H) / 2`.
pub fn hermitian_part(a: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    (a + a.adjoint()) * Complex64::new(0.5, 0.0)
}

/// Symmetric part `(a + a^T) / 2` of a real matrix.
pub fn symmetric_part(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Inverse of a Hermitian PSD matrix that may be rank deficient, via a
/// trace-scaled ridge. Used to turn degenerate message covariances into
/// usable precisions.
pub fn ridge_inverse(a: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    let n = a.nrows();
    let trace: f64 = (0..n).map(|i| a[(i, i)].re).sum();
    let ridge = RIDGE_REL * trace.abs().max(f64::MIN_POSITIVE) / n as f64;
    let mut shifted = hermitian_part(a);
    for i in 0..n {
        shifted[(i, i)] += Complex64::new(ridge, 0.0);
    }
    Ok(HermitianSolver::new(&shifted)?.inverse())
}

/// Covariance from a log-density Hessian: inverts `-H` after flooring its
/// eigenvalues at `1e-6 * max|eig|`, so a saddle or flat direction still
/// yields a proper (positive definite) covariance.
pub fn covariance_from_hessian(h: &DMatrix<f64>) -> DMatrix<f64> {
    let neg = symmetric_part(h).map(|x| -x);
    let eig = SymmetricEigen::new(neg);
    let max_abs = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, &v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let floor = 1e-6 * max_abs;
    let n = h.nrows();
    let mut cov = DMatrix::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k].max(floor);
        let q = eig.eigenvectors.column(k);
        cov += (&q * q.transpose()) / lam;
    }
    symmetric_part(&cov)
}

/// Inverse of a real symmetric PSD matrix with the same eigenvalue flooring.
pub fn floored_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    covariance_from_hessian(&a.map(|x| -x))
}

/// Solve the real symmetric positive definite system `a x = b` with a ridge
/// fallback.
pub fn sym_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    if let Some(chol) = nalgebra::Cholesky::new(symmetric_part(a)) {
        return Ok(chol.solve(b));
    }
    let trace: f64 = (0..n).map(|i| a[(i, i)]).sum();
    let ridge = RIDGE_REL * trace.abs().max(f64::MIN_POSITIVE) / n as f64;
    let mut shifted = symmetric_part(a);
    for i in 0..n {
        shifted[(i, i)] += ridge;
    }
    nalgebra::Cholesky::new(shifted)
        .map(|c| c.solve(b))
        .ok_or_else(|| Error::Numerical("symmetric solve failed".into()))
}

/// Smallest eigenvalue of a real symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetric_part(a))
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v))
}
