//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{FpgError, Result};

/// Reciprocal condition number below which a covariance is treated as singular.
pub const RCOND_SINGULAR: f64 = 1e-12;

/// Default upper bound on `d` for diagnostics that form explicit inverses.
pub const DEFAULT_DENSE_INVERSE_CAP: usize = 4096;

/// Cholesky factorization of a symmetric positive definite covariance,
/// reused for every right-hand side at one step.
#[derive(Clone, Debug)]
pub struct CovFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl CovFactor {
    /// Factorizes `sigma`. When `checked` is set the reciprocal condition is
    /// computed first and a singular matrix is reported together with the
    /// eigenvector spanning its (numerical) null space.
    pub fn new(sigma: &DMatrix<f64>, h: usize, checked: bool) -> Result<Self> {
        if checked {
            let eig = SymmetricEigen::new(sigma.clone());
            let (imin, min) = argmin(eig.eigenvalues.as_slice());
            let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
            if max <= 0.0 || min / max < RCOND_SINGULAR {
                return Err(FpgError::SingularCovariance {
                    h,
                    direction: eig.eigenvectors.column(imin).iter().copied().collect(),
                });
            }
        }
        match nalgebra::Cholesky::new(sigma.clone()) {
            Some(chol) => Ok(Self { chol }),
            None => {
                let eig = SymmetricEigen::new(sigma.clone());
                let (imin, _) = argmin(eig.eigenvalues.as_slice());
                Err(FpgError::SingularCovariance {
                    h,
                    direction: eig.eigenvectors.column(imin).iter().copied().collect(),
                })
            }
        }
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    /// Solves `sigma X = rhs`, skipping columns of `rhs` that are exactly zero.
    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
        for c in 0..rhs.ncols() {
            let col = rhs.column(c);
            if col.iter().all(|&x| x == 0.0) {
                continue;
            }
            let sol = self.chol.solve(&col.into_owned());
            out.set_column(c, &sol);
        }
        out
    }
}

fn argmin(xs: &[f64]) -> (usize, f64) {
    xs.iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, x)| if x < acc.1 { (i, x) } else { acc })
}

/// Symmetric matrix power `A^p` through the eigendecomposition. Eigenvalues
/// at or below `tol * max_eig` are treated as zero (pseudo-power), which is
/// only meaningful for negative `p` on a PSD matrix.
pub fn sym_pow(a: &DMatrix<f64>, p: f64, tol: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let vals = eig.eigenvalues.map(|l| {
        if l <= tol * max || l <= 0.0 {
            0.0
        } else {
            l.powf(p)
        }
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.clone().singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(symmetrize(a)).eigenvalues.iter().copied().collect();
    v.sort_by(|x, y| x.partial_cmp(y).unwrap());
    v
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
