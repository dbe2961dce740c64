//! Frobenius-nearest positive semidefinite matrices.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues in `[-ROUNDOFF_EIGEN * ‖S‖, 0)` are round-off, not curvature.
pub const ROUNDOFF_EIGEN: f64 = 1e-9;

/// Outcome of a projection, with the number of clearly negative eigenvalues
/// that had to be clamped.
#[derive(Clone, Debug)]
pub struct Projection {
    pub matrix: DMatrix<f64>,
    pub clamped: usize,
}

/// Project `s` onto the PSD cone: symmetrize, eigendecompose, clamp negative
/// eigenvalues to zero and reassemble.
pub fn psd_project(s: &DMatrix<f64>) -> Result<Projection> {
    if !s.is_square() {
        return Err(Error::Dimension(format!(
            "cannot project a {}x{} matrix",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::Eigen("matrix has non-finite entries".into()));
    }
    let sym = (s + s.transpose()) * 0.5;
    let scale = sym.norm();
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    let mut clamped = 0;
    let mut values = eig.eigenvalues;
    for lam in values.iter_mut() {
        if *lam < 0.0 {
            if *lam < -ROUNDOFF_EIGEN * scale {
                clamped += 1;
            }
            *lam = 0.0;
        }
    }
    let q = eig.eigenvectors;
    let mut scaled = q.clone();
    for (mut col, &lam) in scaled.column_iter_mut().zip(values.iter()) {
        col *= lam;
    }
    let mut matrix = scaled * q.transpose();
    symmetrize_in_place(&mut matrix);
    Ok(Projection { matrix, clamped })
}

pub(crate) fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    Ok(eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min))
}

/// A symmetric PSD matrix `A` of size `(n+1) × (n+1)` defining the parameter
/// model `α(ξ) = ξ̄ᵀ A ξ̄` with `ξ̄ = [ξ, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticModel {
    a: DMatrix<f64>,
}

impl QuadraticModel {
    /// Wrap `a`, checking symmetry to `1e-12` (relative) and PSD to
    /// `-1e-9 ‖A‖`.
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() < 2 {
            return Err(Error::Dimension(format!(
                "model matrix must be square of size >= 2, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig(
                "model matrix has non-finite entries".into(),
            ));
        }
        let scale = a.norm();
        let asym = (&a - a.transpose()).amax();
        if asym > 1e-12 * (1.0 + scale) {
            return Err(Error::InvalidConfig(format!(
                "model matrix is not symmetric (max deviation {asym:e})"
            )));
        }
        let min_eig = min_eigenvalue(&a)?;
        if min_eig < -ROUNDOFF_EIGEN * scale {
            return Err(Error::InvalidConfig(format!(
                "model matrix is not positive semidefinite (min eigenvalue {min_eig:e})"
            )));
        }
        Ok(QuadraticModel { a })
    }

    /// Wrap a symmetric matrix without the PSD check. The result is a point
    /// of the ambient space of symmetric matrices (a search direction, or a
    /// difference of models), not necessarily a valid model.
    pub fn from_symmetric(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension(format!(
                "model matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let asym = (&a - a.transpose()).amax();
        if asym > 1e-12 * (1.0 + a.norm()) {
            return Err(Error::InvalidConfig(format!(
                "matrix is not symmetric (max deviation {asym:e})"
            )));
        }
        Ok(QuadraticModel { a })
    }

    /// Wrap a matrix produced by a projection without re-checking it.
    pub(crate) fn from_projected(a: DMatrix<f64>) -> Self {
        QuadraticModel { a }
    }

    pub fn zeros(dim: usize) -> Self {
        QuadraticModel {
            a: DMatrix::zeros(dim, dim),
        }
    }

    /// The embedding of a constant parameter: only the bottom-right entry set.
    pub fn constant(dim: usize, alpha: f64) -> Self {
        let mut a = DMatrix::zeros(dim, dim);
        a[(dim - 1, dim - 1)] = alpha;
        QuadraticModel { a }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Patch width `p` with `p² + 1 = dim`, if there is one.
    pub fn patch_width(&self) -> Option<usize> {
        let n = self.dim() - 1;
        let p = (n as f64).sqrt().round() as usize;
        (p * p == n).then_some(p)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.a
    }

    /// `ξ̄ᵀ A ξ̄` without clamping.
    pub fn quadratic_form(&self, lifted: &[f64]) -> f64 {
        debug_assert_eq!(lifted.len(), self.dim());
        let n = self.dim();
        let mut total = 0.0;
        for j in 0..n {
            let col = self.a.column(j);
            let mut acc = 0.0;
            for (i, &x) in lifted.iter().enumerate() {
                acc += col[i] * x;
            }
            total += lifted[j] * acc;
        }
        total
    }
}
