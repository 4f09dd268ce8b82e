//! Small dense matrix diagnostics: determinant and eigenvalues.
//!
//! Matrices are row-major `Vec<Vec<f64>>`. Eigenvalues come from nalgebra's
//! real Schur decomposition (Householder reduction to Hessenberg form, then
//! shifted QR), which is plenty for the head-projection matrices (at most
//! 64 x 64) inspected here.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub const MAX_EIGEN_DIM: usize = 64;

fn to_matrix(a: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = a.len();
    if n == 0 {
        return Err(Error::Shape("empty matrix".into()));
    }
    if a.iter().any(|r| r.len() != n) {
        return Err(Error::Shape(format!(
            "matrix is not square ({} rows, {} columns)",
            n,
            a[0].len()
        )));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| a[i][j]))
}

/// Determinant by LU decomposition with partial pivoting.
pub fn determinant(a: &[Vec<f64>]) -> Result<f64> {
    Ok(to_matrix(a)?.lu().determinant())
}

/// All eigenvalues, in no particular order.
pub fn eigenvalues(a: &[Vec<f64>]) -> Result<Vec<Complex64>> {
    let m = to_matrix(a)?;
    if m.nrows() > MAX_EIGEN_DIM {
        return Err(Error::Shape(format!(
            "eigenvalues limited to {MAX_EIGEN_DIM}x{MAX_EIGEN_DIM}, got {0}x{0}",
            m.nrows()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("matrix has non-finite entries".into()));
    }
    let schur = m
        .try_schur(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Shape("eigenvalue iteration did not converge".into()))?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// Smallest eigenvalue magnitude.
pub fn min_eigenvalue_magnitude(a: &[Vec<f64>]) -> Result<f64> {
    Ok(eigenvalues(a)?
        .iter()
        .map(|z| z.norm())
        .fold(f64::INFINITY, f64::min))
}
