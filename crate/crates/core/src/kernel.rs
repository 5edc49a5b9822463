//! Squared-exponential kernel with automatic relevance determination.
//!
//! `k(x, x') = sf2 * exp(-0.5 * sum_d (x_d - x'_d)^2 / l_d)`, where each `l_d`
//! scales the squared distance along dimension `d` directly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl Hyperparams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>, noise_variance: f64) -> Result<Self> {
        let hp = Self {
            signal_variance,
            lengthscales,
            noise_variance,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.signal_variance) {
            return Err(Error::InvalidHyperparams(format!(
                "signal variance {}",
                self.signal_variance
            )));
        }
        if !ok(self.noise_variance) {
            return Err(Error::InvalidHyperparams(format!(
                "noise variance {}",
                self.noise_variance
            )));
        }
        if self.lengthscales.is_empty() {
            return Err(Error::InvalidHyperparams("no lengthscales".into()));
        }
        if let Some(l) = self.lengthscales.iter().find(|&&l| !ok(l)) {
            return Err(Error::InvalidHyperparams(format!("lengthscale {l}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Number of optimised parameters: signal variance, D lengthscales, noise.
    pub fn n_params(&self) -> usize {
        self.dim() + 2
    }

    /// `[log sf2, log l_1, .., log l_D, log noise]`
    pub fn to_log_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.push(self.signal_variance.ln());
        p.extend(self.lengthscales.iter().map(|l| l.ln()));
        p.push(self.noise_variance.ln());
        p
    }

    pub fn from_log_params(p: &[f64]) -> Self {
        assert!(p.len() >= 3, "need at least three log-parameters");
        let d = p.len() - 2;
        Self {
            signal_variance: p[0].exp(),
            lengthscales: p[1..=d].iter().map(|v| v.exp()).collect(),
            noise_variance: p[d + 1].exp(),
        }
    }

    /// Default starting point: unit signal variance, per-dimension input
    /// standard deviation as lengthscale, noise variance 0.1.
    pub fn default_for(x: &DMatrix<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let lengthscales = (0..x.ncols())
            .map(|d| {
                let col = x.column(d);
                let mean = col.sum() / n;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            signal_variance: 1.0,
            lengthscales,
            noise_variance: 0.1,
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: d,
            });
        }
        Ok(())
    }
}

#[inline]
fn scaled_sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize, ls: &[f64]) -> f64 {
    let mut s = 0.0;
    for (d, l) in ls.iter().enumerate() {
        let diff = a[(i, d)] - b[(j, d)];
        s += diff * diff / l;
    }
    s
}

pub fn kernel_eval(x: &[f64], x2: &[f64], hp: &Hyperparams) -> Result<f64> {
    hp.check_dim(x.len())?;
    hp.check_dim(x2.len())?;
    let s: f64 = x
        .iter()
        .zip(x2)
        .zip(&hp.lengthscales)
        .map(|((a, b), l)| (a - b) * (a - b) / l)
        .sum();
    Ok(hp.signal_variance * (-0.5 * s).exp())
}

/// Cross-covariance between the rows of `x` and the rows of `x2`.
pub fn kernel_matrix(x: &DMatrix<f64>, x2: &DMatrix<f64>, hp: &Hyperparams) -> Result<DMatrix<f64>> {
    hp.check_dim(x.ncols())?;
    hp.check_dim(x2.ncols())?;
    let ls = &hp.lengthscales;
    let sf2 = hp.signal_variance;
    Ok(DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| {
        sf2 * (-0.5 * scaled_sq_dist(x, i, x2, j, ls)).exp()
    }))
}

/// Symmetric training covariance; only the lower triangle is evaluated.
pub fn kernel_matrix_sym(x: &DMatrix<f64>, hp: &Hyperparams) -> Result<DMatrix<f64>> {
    hp.check_dim(x.ncols())?;
    let n = x.nrows();
    let ls = &hp.lengthscales;
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = hp.signal_variance;
        for i in j + 1..n {
            let v = hp.signal_variance * (-0.5 * scaled_sq_dist(x, i, x, j, ls)).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Covariance vector between the rows of `x` and a single point.
pub fn kernel_vector(x: &DMatrix<f64>, point: &[f64], hp: &Hyperparams) -> Result<nalgebra::DVector<f64>> {
    hp.check_dim(x.ncols())?;
    hp.check_dim(point.len())?;
    let ls = &hp.lengthscales;
    Ok(nalgebra::DVector::from_fn(x.nrows(), |i, _| {
        let mut s = 0.0;
        for (d, l) in ls.iter().enumerate() {
            let diff = x[(i, d)] - point[d];
            s += diff * diff / l;
        }
        hp.signal_variance * (-0.5 * s).exp()
    }))
}

/// Derivatives of `k(X, X)` with respect to `log sf2` and each `log l_d`.
///
/// Returns `D + 1` matrices in the same order as [`Hyperparams::to_log_params`];
/// the noise term is not part of the kernel and has no entry here.
pub fn kernel_grad(x: &DMatrix<f64>, hp: &Hyperparams) -> Result<Vec<DMatrix<f64>>> {
    if x.nrows() == 0 {
        return Err(Error::invalid("kernel_grad needs at least one input row"));
    }
    let k = kernel_matrix_sym(x, hp)?;
    let n = x.nrows();
    let mut grads = Vec::with_capacity(hp.dim() + 1);
    grads.push(k.clone());
    for (d, l) in hp.lengthscales.iter().enumerate() {
        // d/d(log l) of exp(-0.5 r^2 / l) = 0.5 r^2 / l * exp(..)
        let g = DMatrix::from_fn(n, n, |i, j| {
            let diff = x[(i, d)] - x[(j, d)];
            k[(i, j)] * 0.5 * diff * diff / l
        });
        grads.push(g);
    }
    Ok(grads)
}
