//! Nested pointwise aggregation of dependent experts.
//!
//! Each expert mean is a linear estimator `mu_i = gamma_i . y_i`, so the joint
//! law of `(y*, mu_1, .., mu_M)` is Gaussian with
//!
//! * `k_A[i]     = gamma_i k(X_i, x*)`
//! * `K_A[i, j]  = gamma_i Cov(y_i, y_j) gamma_j^T`
//!
//! and the aggregate is the conditional mean `k_A^T K_A^-1 mu` with variance
//! `k(x*, x*) - k_A^T K_A^-1 k_A`. Restricting both to a subset of experts gives
//! the selected-expert variant.
//!
//! `Cov(y_i, y_j)` is `k(X_i, X_j)` plus the noise variance on every training
//! row the two experts share; for disjoint partitions this only touches the
//! diagonal blocks. [`NpaeOptions::literal_diagonal`] drops the noise term.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::experts::ExpertEnsemble;
use crate::kernel::{kernel_matrix, kernel_vector};
use crate::linalg::solve_psd;
use crate::{pool, Error, PredictiveDist, Result};

/// Largest concatenated training size whose cross-covariance is cached densely.
const DENSE_CACHE_LIMIT: usize = 5000;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NpaeOptions {
    /// Use `gamma_i k(X_i, X_i) gamma_i^T` on the diagonal of `K_A`, i.e. the
    /// noise-free form for every block.
    pub literal_diagonal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseCov {
    pub k_a: DVector<f64>,
    pub k_aa: DMatrix<f64>,
    pub prior_var: f64,
    /// Expert means at the point, in subset order.
    pub means: DVector<f64>,
}

struct CrossCov<'a> {
    ens: &'a ExpertEnsemble,
    subset: Vec<usize>,
    offsets: Vec<usize>,
    dense: Option<DMatrix<f64>>,
    /// For each pair (a <= b) of subset positions, the local row positions
    /// the two experts share.
    shared: HashMap<(usize, usize), Vec<(usize, usize)>>,
    noise: f64,
}

impl<'a> CrossCov<'a> {
    fn new(ens: &'a ExpertEnsemble, subset: &[usize], opts: NpaeOptions) -> Result<Self> {
        ens.check_subset(subset)?;
        let mut offsets = Vec::with_capacity(subset.len());
        let mut total = 0;
        for &i in subset {
            offsets.push(total);
            total += ens.experts[i].n();
        }

        let dense = if total <= DENSE_CACHE_LIMIT {
            let x = DMatrix::from_fn(total, ens.dim(), |r, d| {
                let a = offsets.partition_point(|&o| o <= r) - 1;
                ens.experts[subset[a]].x()[(r - offsets[a], d)]
            });
            Some(crate::kernel::kernel_matrix_sym(&x, &ens.hp)?)
        } else {
            None
        };

        let mut shared = HashMap::new();
        if !opts.literal_diagonal {
            let maps: Vec<HashMap<usize, usize>> = subset
                .iter()
                .map(|&i| ens.experts[i].rows.iter().enumerate().map(|(p, &r)| (r, p)).collect())
                .collect();
            for a in 0..subset.len() {
                for b in a..subset.len() {
                    let pairs: Vec<(usize, usize)> = ens.experts[subset[a]]
                        .rows
                        .iter()
                        .enumerate()
                        .filter_map(|(pa, r)| maps[b].get(r).map(|&pb| (pa, pb)))
                        .collect();
                    if !pairs.is_empty() {
                        shared.insert((a, b), pairs);
                    }
                }
            }
        }

        Ok(Self {
            ens,
            subset: subset.to_vec(),
            offsets,
            dense,
            shared,
            noise: ens.hp.noise_variance,
        })
    }

    fn at(&self, point: &[f64]) -> Result<PointwiseCov> {
        let ens = self.ens;
        let m = self.subset.len();
        let mut gammas = Vec::with_capacity(m);
        let mut k_a = DVector::zeros(m);
        let mut means = DVector::zeros(m);
        for (a, &i) in self.subset.iter().enumerate() {
            let e = &ens.experts[i];
            let k = kernel_vector(e.x(), point, &ens.hp)?;
            let g = e.gp.solve(&k);
            k_a[a] = g.dot(&k);
            means[a] = g.dot(e.y());
            gammas.push(g);
        }

        let mut k_aa = DMatrix::zeros(m, m);
        match &self.dense {
            Some(kc) => {
                for b in 0..m {
                    let nb = gammas[b].len();
                    let rows = self.offsets[b] + nb;
                    let u = kc.view((0, self.offsets[b]), (rows, nb)) * &gammas[b];
                    for a in 0..=b {
                        let na = gammas[a].len();
                        let v = gammas[a].dot(&u.rows(self.offsets[a], na));
                        k_aa[(a, b)] = v;
                        k_aa[(b, a)] = v;
                    }
                }
            }
            None => {
                for b in 0..m {
                    let xb = ens.experts[self.subset[b]].x();
                    for a in 0..=b {
                        let xa = ens.experts[self.subset[a]].x();
                        let kab = kernel_matrix(xa, xb, &ens.hp)?;
                        let v = gammas[a].dot(&(kab * &gammas[b]));
                        k_aa[(a, b)] = v;
                        k_aa[(b, a)] = v;
                    }
                }
            }
        }
        for (&(a, b), pairs) in &self.shared {
            let extra: f64 = pairs.iter().map(|&(pa, pb)| gammas[a][pa] * gammas[b][pb]).sum();
            k_aa[(a, b)] += self.noise * extra;
            if a != b {
                k_aa[(b, a)] += self.noise * extra;
            }
        }

        Ok(PointwiseCov {
            k_a,
            k_aa,
            prior_var: ens.hp.signal_variance,
            means,
        })
    }
}

pub fn pointwise_cov(ens: &ExpertEnsemble, point: &[f64], subset: &[usize]) -> Result<PointwiseCov> {
    pointwise_cov_with(ens, point, subset, NpaeOptions::default())
}

pub fn pointwise_cov_with(
    ens: &ExpertEnsemble,
    point: &[f64],
    subset: &[usize],
    opts: NpaeOptions,
) -> Result<PointwiseCov> {
    if point.len() != ens.dim() {
        return Err(Error::DimensionMismatch {
            expected: ens.dim(),
            found: point.len(),
        });
    }
    CrossCov::new(ens, subset, opts)?.at(point)
}

/// Conditional mean and variance of `y*` given the subset's expert means.
/// Returns `None` when `K_A` cannot be (pseudo-)inverted to a finite result.
pub fn aggregate_point(cov: &PointwiseCov) -> Option<(f64, f64)> {
    let (w, _) = solve_psd(&cov.k_aa, &cov.k_a)?;
    let mean = w.dot(&cov.means);
    let var = (cov.prior_var - w.dot(&cov.k_a)).clamp(0.0, cov.prior_var);
    if mean.is_finite() && var.is_finite() {
        Some((mean, var))
    } else {
        None
    }
}

pub fn npae_aggregate(ens: &ExpertEnsemble, xs: &DMatrix<f64>, subset: &[usize]) -> Result<PredictiveDist> {
    npae_aggregate_with(ens, xs, subset, NpaeOptions::default())
}

/// Aggregates at every row of `xs`. Points whose covariance system cannot be
/// solved fall back to the prior and are listed in `failures`.
pub fn npae_aggregate_with(
    ens: &ExpertEnsemble,
    xs: &DMatrix<f64>,
    subset: &[usize],
    opts: NpaeOptions,
) -> Result<PredictiveDist> {
    if xs.ncols() != ens.dim() {
        return Err(Error::DimensionMismatch {
            expected: ens.dim(),
            found: xs.ncols(),
        });
    }
    let cross = CrossCov::new(ens, subset, opts)?;
    let results = pool::map_indexed(xs.nrows(), |t| {
        let point: Vec<f64> = xs.row(t).iter().copied().collect();
        cross.at(&point).map(|cov| aggregate_point(&cov))
    });

    let prior = ens.hp.signal_variance;
    let mut out = PredictiveDist::new(Vec::with_capacity(xs.nrows()), Vec::with_capacity(xs.nrows()));
    for (t, r) in results.into_iter().enumerate() {
        match r? {
            Some((m, v)) => {
                out.means.push(m);
                out.variances.push(v);
            }
            None => {
                out.means.push(0.0);
                out.variances.push(prior);
                out.failures.push(t);
            }
        }
    }
    Ok(out)
}

// Shares trait impls with the ensemble; the thread pool needs it.
#[allow(dead_code)]
fn assert_sync() {
    fn is_sync<T: Sync>() {}
    is_sync::<CrossCov<'static>>();
}
