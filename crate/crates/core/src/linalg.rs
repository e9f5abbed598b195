//! Dense linear algebra helpers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

pub type CMatrix<T> = DMatrix<Complex<T>>;
pub type CVector<T> = DVector<Complex<T>>;

/// Promotes a real matrix to complex.
pub fn complexify<T: Real>(m: &DMatrix<T>) -> CMatrix<T> {
    m.map(|x| Complex::new(x, T::zero()))
}

/// `(A + A^H) / 2`.
pub fn hermitian_part<T: Real>(a: &CMatrix<T>) -> CMatrix<T> {
    let half = lit::<T>(0.5);
    (a + a.adjoint()).map(|z| z * half)
}

/// `(A + A^T) / 2`.
pub fn symmetric_part<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    (a + a.transpose()) * lit::<T>(0.5)
}

/// `A kron B` for real matrices.
pub fn kron<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    a.kronecker(b)
}

/// Factor `L` with `L L^T = A` for a symmetric positive semidefinite `A`.
///
/// Eigenvalues below `rel_tol * max|lambda|` are clamped to zero, so `A` may
/// be numerically semidefinite.
pub fn psd_factor<T: Real>(a: &DMatrix<T>, rel_tol: T) -> DMatrix<T> {
    let eig = SymmetricEigen::new(symmetric_part(a));
    let scale = eig.eigenvalues.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    let cut = scale * rel_tol;
    let mut l = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = if lambda > cut { lambda.sqrt() } else { T::zero() };
        l.column_mut(j).scale_mut(s);
    }
    l
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue<T: Real>(a: &DMatrix<T>) -> T {
    let eig = SymmetricEigen::new(symmetric_part(a));
    eig.eigenvalues.iter().fold(T::infinity(), |m, &v| m.min(v))
}

/// Cholesky factorisation of a Hermitian positive definite matrix with the
/// log-determinant cached.
#[derive(Debug, Clone)]
pub struct HermitianFactor<T: Real> {
    chol: Cholesky<Complex<T>, Dyn>,
    log_det: T,
}

impl<T: Real> HermitianFactor<T> {
    pub fn new(a: CMatrix<T>, matrix: &'static str, hint: &'static str) -> Result<Self> {
        let chol = Cholesky::new(a).ok_or(Error::NotPositiveDefinite { matrix, hint })?;
        let log_det = chol
            .l_dirty()
            .diagonal()
            .iter()
            .fold(T::zero(), |acc, d| acc + d.re.ln())
            * lit::<T>(2.0);
        if !log_det.is_finite() {
            return Err(Error::NotPositiveDefinite { matrix, hint });
        }
        Ok(HermitianFactor { chol, log_det })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn log_det(&self) -> T {
        self.log_det
    }

    /// Lower-triangular factor `L` with `L L^H = A`.
    pub fn lower(&self) -> CMatrix<T> {
        self.chol.l()
    }

    pub fn solve(&self, b: &CMatrix<T>) -> CMatrix<T> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &CVector<T>) -> CVector<T> {
        self.chol.solve(b)
    }

    /// `x^H A^{-1} x`.
    pub fn quad_form(&self, x: &CVector<T>) -> T {
        let mut y = x.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut y);
        y.norm_squared()
    }

    pub fn inverse(&self) -> CMatrix<T> {
        self.chol.inverse()
    }
}

/// Pseudo-inverse of a symmetric positive semidefinite matrix.
#[derive(Debug, Clone)]
pub struct SymmetricPinv<T: Real> {
    pub inverse: DMatrix<T>,
    /// `lambda_max / lambda_min`; infinite when the smallest eigenvalue is
    /// not positive.
    pub condition: T,
    pub rank: usize,
    /// Unit eigenvectors whose eigenvalues fell below the threshold.
    pub null_space: Vec<DVector<T>>,
}

pub fn symmetric_pinv<T: Real>(a: &DMatrix<T>, rel_tol: T) -> SymmetricPinv<T> {
    let n = a.nrows();
    let eig = SymmetricEigen::new(symmetric_part(a));
    let max = eig.eigenvalues.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(T::infinity(), |m, &v| m.min(v));
    let cut = max * rel_tol;
    let mut inverse = DMatrix::zeros(n, n);
    let mut null_space = Vec::new();
    let mut rank = 0;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(j);
        if lambda > cut && max > T::zero() {
            inverse += v * v.transpose() / lambda;
            rank += 1;
        } else {
            null_space.push(v.into_owned());
        }
    }
    let condition = if min > T::zero() { max / min } else { T::infinity() };
    SymmetricPinv {
        inverse,
        condition,
        rank,
        null_space,
    }
}

/// Scale-invariant discrepancy `max_ij |A - B|_ij / sqrt(|B_ii B_jj|)`.
///
/// Entries whose reference diagonal vanishes fall back to the largest
/// diagonal of `B`.
pub fn normalized_error<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    assert_eq!(a.shape(), b.shape());
    let dmax = b.diagonal().iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    let mut worst = T::zero();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let mut s = (b[(i, i)] * b[(j, j)]).abs().sqrt();
            if !(s > T::zero()) {
                s = dmax;
            }
            let e = if s > T::zero() {
                (a[(i, j)] - b[(i, j)]).abs() / s
            } else {
                (a[(i, j)] - b[(i, j)]).abs()
            };
            worst = worst.max(e);
        }
    }
    worst
}
