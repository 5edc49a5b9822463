//! Cholesky factorisation with diagonal jitter escalation, and a symmetric
//! pseudo-inverse fallback.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::{Error, Result};

/// Cholesky factor of `A + jitter * I`.
#[derive(Debug, Clone)]
pub struct Factor {
    chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `(L L^T)^-1` computed as `L^-T L^-1`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut li = DMatrix::identity(n, n);
        self.chol.l_dirty().solve_lower_triangular_mut(&mut li);
        li.transpose() * li
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }
}

fn try_cholesky(a: &DMatrix<f64>, jitter: f64) -> Option<Cholesky<f64, Dyn>> {
    let mut m = a.clone();
    if jitter > 0.0 {
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
    }
    let chol = Cholesky::new(m)?;
    // nalgebra accepts tiny positive pivots; reject factors that cannot be inverted.
    if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
        Some(chol)
    } else {
        None
    }
}

/// Factorises a covariance matrix: plain attempt first, then jitter
/// `1e-10 * mean(diag)` escalated by 10x up to `1e-4 * mean(diag)`.
pub fn cholesky_jitter(a: &DMatrix<f64>) -> Result<Factor> {
    if let Some(chol) = try_cholesky(a, 0.0) {
        return Ok(Factor { chol, jitter: 0.0 });
    }
    let n = a.nrows().max(1) as f64;
    let scale = (a.diagonal().sum() / n).abs().max(f64::MIN_POSITIVE);
    let mut rel = 1e-10;
    let mut last = 0.0;
    while rel <= 1e-4 * (1.0 + 1e-9) {
        last = rel * scale;
        if let Some(chol) = try_cholesky(a, last) {
            return Ok(Factor { chol, jitter: last });
        }
        rel *= 10.0;
    }
    Err(Error::Singular { jitter: last })
}

/// How a symmetric PSD system was solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveRoute {
    Cholesky,
    PseudoInverse,
}

/// Solves `A w = b` for symmetric PSD `A` that may be singular.
///
/// Cholesky with jitter `1e-10 .. 1e-6` of the largest diagonal entry, then an
/// eigendecomposition pseudo-inverse with cutoff `n * eps * lambda_max`.
/// Returns `None` only if the result is not finite.
pub fn solve_psd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<(DVector<f64>, SolveRoute)> {
    let max_diag = a.diagonal().iter().cloned().fold(0.0f64, f64::max);
    if max_diag > 0.0 && max_diag.is_finite() {
        let mut rel = 1e-10;
        while rel <= 1e-6 * (1.0 + 1e-9) {
            if let Some(chol) = try_cholesky(a, rel * max_diag) {
                let w = chol.solve(b);
                if w.iter().all(|v| v.is_finite()) {
                    return Some((w, SolveRoute::Cholesky));
                }
            }
            rel *= 10.0;
        }
    }
    let w = pinv_symmetric(a) * b;
    if w.iter().all(|v| v.is_finite()) {
        Some((w, SolveRoute::PseudoInverse))
    } else {
        None
    }
}

/// Moore-Penrose inverse of a symmetric matrix via its eigendecomposition.
pub fn pinv_symmetric(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = n as f64 * f64::EPSILON * lmax;
    let mut out = DMatrix::zeros(n, n);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam.abs() > cutoff && lam.abs() > 0.0 {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lam;
        }
    }
    out
}
