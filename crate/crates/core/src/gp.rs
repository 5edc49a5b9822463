//! Exact Gaussian-process regression: marginal-likelihood training and
//! prediction on the whole training set.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kernel::{kernel_grad, kernel_matrix, kernel_matrix_sym, kernel_vector};
use crate::linalg::{cholesky_jitter, Factor};
use crate::optim::{self, LbfgsOptions};
use crate::{pool, Error, Hyperparams, PredictiveDist, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Number of initialisations; the first is the supplied point, the rest
    /// are log-uniform perturbations of +-1 around it.
    pub restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 1,
            seed: 0,
            max_iter: 200,
            grad_tol: 1e-6,
        }
    }
}

/// A GP conditioned on `(x, y)` under fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct GpModel {
    x: DMatrix<f64>,
    y: DVector<f64>,
    hp: Hyperparams,
    factor: Factor,
    l: DMatrix<f64>,
    alpha: DVector<f64>,
}

impl GpModel {
    /// Factorises `K + noise * I` and precomputes `alpha = (K + noise * I)^-1 y`.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, hp: Hyperparams) -> Result<Self> {
        hp.validate()?;
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                found: y.len(),
            });
        }
        if x.nrows() == 0 {
            return Err(Error::invalid("GP needs at least one training point"));
        }
        let mut c = kernel_matrix_sym(&x, &hp)?;
        for i in 0..c.nrows() {
            c[(i, i)] += hp.noise_variance;
        }
        let factor = cholesky_jitter(&c)?;
        let alpha = factor.solve_vec(&y);
        let l = factor.l();
        Ok(Self {
            x,
            y,
            hp,
            factor,
            l,
            alpha,
        })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn hp(&self) -> &Hyperparams {
        &self.hp
    }

    /// Lower Cholesky factor of `K + noise * I` (plus any jitter that was needed).
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn jitter(&self) -> f64 {
        self.factor.jitter
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        -0.5 * self.y.dot(&self.alpha) - 0.5 * self.factor.log_det() - 0.5 * self.n() as f64 * LN_2PI
    }

    /// `(K + noise * I)^-1 b`
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve_vec(b)
    }

    /// Linear-estimator weights at `point`: the predictive mean is `gamma . y`.
    pub fn gamma(&self, point: &[f64]) -> Result<DVector<f64>> {
        let k = kernel_vector(&self.x, point, &self.hp)?;
        Ok(self.factor.solve_vec(&k))
    }

    /// Latent mean and variance at a single point.
    pub fn predict_point(&self, point: &[f64]) -> Result<(f64, f64)> {
        let k = kernel_vector(&self.x, point, &self.hp)?;
        let mean = k.dot(&self.alpha);
        let v = self
            .l
            .solve_lower_triangular(&k)
            .ok_or(Error::Singular { jitter: self.factor.jitter })?;
        let prior = self.hp.signal_variance;
        Ok((mean, (prior - v.norm_squared()).clamp(0.0, prior)))
    }

    /// Latent predictive mean and variance at every row of `xs`.
    pub fn predict(&self, xs: &DMatrix<f64>) -> Result<PredictiveDist> {
        let ks = kernel_matrix(&self.x, xs, &self.hp)?;
        let means = (ks.transpose() * &self.alpha).as_slice().to_vec();
        let v = self
            .l
            .solve_lower_triangular(&ks)
            .ok_or(Error::Singular { jitter: self.factor.jitter })?;
        let prior = self.hp.signal_variance;
        let variances = v
            .column_iter()
            .map(|c| (prior - c.norm_squared()).clamp(0.0, prior))
            .collect();
        Ok(PredictiveDist::new(means, variances))
    }
}

pub fn gp_predict(model: &GpModel, xs: &DMatrix<f64>) -> Result<PredictiveDist> {
    model.predict(xs)
}

/// Log marginal likelihood and its gradient with respect to the log
/// hyperparameters (ordered as [`Hyperparams::to_log_params`]).
pub fn log_marginal_likelihood(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    hp: &Hyperparams,
) -> Result<(f64, Vec<f64>)> {
    let model = GpModel::new(x.clone(), y.clone(), hp.clone())?;
    let value = model.log_marginal_likelihood();

    // dL/dtheta = 0.5 tr((alpha alpha^T - C^-1) dC/dtheta)
    let mut w = model.factor.inverse();
    w.neg_mut();
    w.ger(1.0, &model.alpha, &model.alpha, 1.0);

    let mut grad = Vec::with_capacity(hp.n_params());
    for dk in kernel_grad(x, hp)? {
        grad.push(0.5 * w.component_mul(&dk).sum());
    }
    grad.push(0.5 * hp.noise_variance * w.trace());
    Ok((value, grad))
}

/// Summed log marginal likelihood over independent datasets sharing `hp`.
pub(crate) fn summed_lml(
    parts: &[(DMatrix<f64>, DVector<f64>)],
    hp: &Hyperparams,
) -> Result<(f64, Vec<f64>)> {
    let results = pool::map_indexed(parts.len(), |i| log_marginal_likelihood(&parts[i].0, &parts[i].1, hp));
    let mut iter = results.into_iter();
    let (mut total, mut grad) = iter.next().ok_or_else(|| Error::invalid("no datasets"))??;
    for r in iter {
        let (v, g) = r?;
        total += v;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((total, grad))
}

/// Maximises the summed log marginal likelihood over `parts` from several
/// initialisations and returns the best hyperparameters with their value.
pub(crate) fn fit_shared(
    parts: &[(DMatrix<f64>, DVector<f64>)],
    init: &Hyperparams,
    opts: &FitOptions,
) -> Result<(Hyperparams, f64)> {
    init.validate()?;
    for (x, y) in parts {
        if x.ncols() != init.dim() {
            return Err(Error::DimensionMismatch {
                expected: init.dim(),
                found: x.ncols(),
            });
        }
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                found: y.len(),
            });
        }
    }
    let base = init.to_log_params();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let lbfgs = LbfgsOptions {
        max_iter: opts.max_iter,
        grad_tol: opts.grad_tol,
        ..Default::default()
    };

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut last_err = String::from("no initialisations were tried");
    for r in 0..opts.restarts.max(1) {
        let start: Vec<f64> = if r == 0 {
            base.clone()
        } else {
            base.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect()
        };
        let objective = |p: &[f64]| {
            let hp = Hyperparams::from_log_params(p);
            summed_lml(parts, &hp)
                .ok()
                .map(|(v, g)| (-v, g.into_iter().map(|x| -x).collect()))
        };
        match optim::minimize(objective, start, lbfgs) {
            Ok(m) => {
                let lml = -m.f;
                if best.as_ref().map_or(true, |(_, b)| lml > *b) {
                    best = Some((m.x, lml));
                }
            }
            Err(e) => last_err = e,
        }
    }
    let (p, lml) = best.ok_or(Error::Training(last_err))?;
    Ok((Hyperparams::from_log_params(&p), lml))
}

/// Trains a full GP by maximising the log marginal likelihood.
pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, init: &Hyperparams, opts: &FitOptions) -> Result<GpModel> {
    if x.nrows() < 2 {
        return Err(Error::invalid("fit needs at least two training points"));
    }
    let parts = [(x.clone(), y.clone())];
    let (hp, _) = fit_shared(&parts, init, opts)?;
    GpModel::new(x.clone(), y.clone(), hp)
}
