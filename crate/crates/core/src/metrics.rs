//! Prediction-quality metrics.

use std::f64::consts::PI;

use crate::{Error, Result};

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, found: b });
    }
    if a == 0 {
        return Err(Error::invalid("metrics need at least one test point"));
    }
    Ok(())
}

/// Mean and population variance.
pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Mean squared error divided by the population variance of the targets.
pub fn smse(y_true: &[f64], mean: &[f64]) -> Result<f64> {
    check_len(y_true.len(), mean.len())?;
    if y_true.len() < 2 {
        return Err(Error::invalid("SMSE needs at least two test points"));
    }
    let (_, var) = mean_var(y_true);
    if !(var > 0.0) {
        return Err(Error::invalid("test targets have zero variance"));
    }
    let mse = y_true.iter().zip(mean).map(|(y, m)| (y - m).powi(2)).sum::<f64>() / y_true.len() as f64;
    Ok(mse / var)
}

fn neg_log_density(y: f64, mean: f64, var: f64) -> f64 {
    0.5 * (2.0 * PI * var).ln() + (y - mean).powi(2) / (2.0 * var)
}

/// Mean negative log predictive density minus that of `N(train_mean, train_var)`.
pub fn msll(y_true: &[f64], mean: &[f64], variance: &[f64], train_mean: f64, train_var: f64) -> Result<f64> {
    check_len(y_true.len(), mean.len())?;
    check_len(y_true.len(), variance.len())?;
    if !(train_var > 0.0) {
        return Err(Error::invalid("trivial predictor variance must be positive"));
    }
    if let Some(t) = variance.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::invalid(format!("non-positive predictive variance at test point {t}")));
    }
    let total: f64 = y_true
        .iter()
        .zip(mean)
        .zip(variance)
        .map(|((&y, &m), &v)| neg_log_density(y, m, v) - neg_log_density(y, train_mean, train_var))
        .sum();
    Ok(total / y_true.len() as f64)
}

pub fn mae(y_true: &[f64], mean: &[f64]) -> Result<f64> {
    check_len(y_true.len(), mean.len())?;
    Ok(y_true.iter().zip(mean).map(|(y, m)| (y - m).abs()).sum::<f64>() / y_true.len() as f64)
}
