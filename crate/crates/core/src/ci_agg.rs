//! Aggregation under conditional independence between experts.
//!
//! Expert moments are the latent predictive mean and variance. The BCM family
//! and the differential-entropy weights use the observation-space prior
//! variance `k(x*, x*) + noise`.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::experts::ExpertEnsemble;
use crate::gp::GpModel;
use crate::{pool, Error, PredictiveDist, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaScheme {
    /// `beta_i = 1`
    Ones,
    /// `beta_i = 1 / M'` over the participating experts.
    Uniform,
    /// `beta_i = 0.5 (log prior_var - log var_i)`, clipped at zero.
    DiffEntropy,
}

impl std::str::FromStr for BetaScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ones" | "one" => Ok(Self::Ones),
            "uniform" => Ok(Self::Uniform),
            "diff_entropy" | "entropy" => Ok(Self::DiffEntropy),
            other => Err(Error::invalid(format!("unknown beta scheme '{other}'"))),
        }
    }
}

pub fn diff_entropy(prior_var: f64, var: f64) -> f64 {
    (0.5 * (prior_var.ln() - var.ln())).max(0.0)
}

pub fn betas(scheme: BetaScheme, variances: &[f64], prior_var: f64) -> Vec<f64> {
    let m = variances.len() as f64;
    match scheme {
        BetaScheme::Ones => vec![1.0; variances.len()],
        BetaScheme::Uniform => vec![1.0 / m; variances.len()],
        BetaScheme::DiffEntropy => variances.iter().map(|&v| diff_entropy(prior_var, v)).collect(),
    }
}

/// Weighted product of Gaussians: `(mean, variance, precision)`.
pub fn fuse_product(means: &[f64], variances: &[f64], betas: &[f64]) -> Option<(f64, f64, f64)> {
    let mut precision = 0.0;
    let mut weighted = 0.0;
    for ((m, v), b) in means.iter().zip(variances).zip(betas) {
        precision += b / v;
        weighted += b / v * m;
    }
    if precision > 0.0 && precision.is_finite() {
        let var = 1.0 / precision;
        Some((var * weighted, var, precision))
    } else {
        None
    }
}

/// Product of weighted experts divided by the prior raised to `sum(beta) - 1`.
pub fn fuse_bcm(means: &[f64], variances: &[f64], betas: &[f64], prior_var: f64) -> Option<(f64, f64)> {
    let mut precision = 0.0;
    let mut weighted = 0.0;
    let mut beta_sum = 0.0;
    for ((m, v), b) in means.iter().zip(variances).zip(betas) {
        precision += b / v;
        weighted += b / v * m;
        beta_sum += b;
    }
    precision += (1.0 - beta_sum) / prior_var;
    if precision > 0.0 && precision.is_finite() {
        let var = 1.0 / precision;
        Some((var * weighted, var))
    } else {
        None
    }
}

/// Fuses augmented experts against the base expert. The first augmented expert
/// has weight one, the others use the entropy difference to the base.
pub fn fuse_grbcm(base: (f64, f64), augmented: &[(f64, f64)]) -> Option<(f64, f64)> {
    let (mb, vb) = base;
    let mut precision = 0.0;
    let mut weighted = 0.0;
    let mut beta_sum = 0.0;
    for (k, &(m, v)) in augmented.iter().enumerate() {
        let b = if k == 0 { 1.0 } else { diff_entropy(vb, v) };
        precision += b / v;
        weighted += b / v * m;
        beta_sum += b;
    }
    precision += (1.0 - beta_sum) / vb;
    weighted += (1.0 - beta_sum) / vb * mb;
    if precision > 0.0 && precision.is_finite() {
        let var = 1.0 / precision;
        Some((var * weighted, var))
    } else {
        None
    }
}

fn subset_predictions(
    ens: &ExpertEnsemble,
    xs: &DMatrix<f64>,
    subset: &[usize],
) -> Result<Vec<PredictiveDist>> {
    ens.check_subset(subset)?;
    if xs.ncols() != ens.dim() {
        return Err(Error::DimensionMismatch {
            expected: ens.dim(),
            found: xs.ncols(),
        });
    }
    pool::map_indexed(subset.len(), |a| ens.experts[subset[a]].gp.predict(xs))
        .into_iter()
        .collect()
}

/// PoE (`Ones`), GPoE (`Uniform`) or entropy-weighted GPoE over `subset`.
pub fn poe_aggregate(
    ens: &ExpertEnsemble,
    xs: &DMatrix<f64>,
    subset: &[usize],
    scheme: BetaScheme,
) -> Result<PredictiveDist> {
    let preds = subset_predictions(ens, xs, subset)?;
    let prior = ens.hp.signal_variance + ens.hp.noise_variance;
    let mut out = PredictiveDist::new(Vec::with_capacity(xs.nrows()), Vec::with_capacity(xs.nrows()));
    for t in 0..xs.nrows() {
        let means: Vec<f64> = preds.iter().map(|p| p.means[t]).collect();
        let vars: Vec<f64> = preds.iter().map(|p| p.variances[t]).collect();
        let b = betas(scheme, &vars, prior);
        let (m, v, _) = fuse_product(&means, &vars, &b)
            .ok_or_else(|| Error::invalid(format!("zero fused precision at test point {t}")))?;
        out.means.push(m);
        out.variances.push(v);
    }
    Ok(out)
}

/// BCM (`Ones`) or RBCM (`DiffEntropy`) over `subset`. Points with a
/// non-positive fused precision fall back to the prior.
pub fn bcm_aggregate(
    ens: &ExpertEnsemble,
    xs: &DMatrix<f64>,
    subset: &[usize],
    scheme: BetaScheme,
) -> Result<PredictiveDist> {
    let preds = subset_predictions(ens, xs, subset)?;
    let prior = ens.hp.signal_variance + ens.hp.noise_variance;
    let mut out = PredictiveDist::new(Vec::with_capacity(xs.nrows()), Vec::with_capacity(xs.nrows()));
    for t in 0..xs.nrows() {
        let means: Vec<f64> = preds.iter().map(|p| p.means[t]).collect();
        let vars: Vec<f64> = preds.iter().map(|p| p.variances[t]).collect();
        let b = betas(scheme, &vars, prior);
        match fuse_bcm(&means, &vars, &b, prior) {
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseChoice<'a> {
    /// Uniformly drawn partition.
    Random,
    /// First entry of an importance ordering.
    TopImportance(&'a [usize]),
}

/// A base (communication) expert plus experts trained on the base partition
/// augmented with each participating partition.
#[derive(Debug, Clone)]
pub struct GrbcmModel {
    pub base: usize,
    pub base_expert: GpModel,
    /// `(partition index, expert on base + partition)`, ascending by index.
    pub augmented: Vec<(usize, GpModel)>,
}

impl GrbcmModel {
    pub fn build(ens: &ExpertEnsemble, base: usize, subset: &[usize]) -> Result<Self> {
        if ens.m() < 2 {
            return Err(Error::invalid("GRBCM needs at least two partitions"));
        }
        if base >= ens.m() {
            return Err(Error::invalid(format!("base expert {base} out of range")));
        }
        ens.check_subset(subset)?;
        let mut members: Vec<usize> = subset.iter().copied().filter(|&i| i != base).collect();
        members.sort_unstable();
        members.dedup();

        let b = &ens.experts[base];
        let base_rows: HashSet<usize> = b.rows.iter().copied().collect();
        let augmented = pool::map_indexed(members.len(), |k| {
            let e = &ens.experts[members[k]];
            let extra: Vec<usize> = (0..e.n()).filter(|&r| !base_rows.contains(&e.rows[r])).collect();
            let n = b.n() + extra.len();
            let x = DMatrix::from_fn(n, ens.dim(), |r, d| {
                if r < b.n() {
                    b.x()[(r, d)]
                } else {
                    e.x()[(extra[r - b.n()], d)]
                }
            });
            let y = DVector::from_fn(n, |r, _| if r < b.n() { b.y()[r] } else { e.y()[extra[r - b.n()]] });
            GpModel::new(x, y, ens.hp.clone()).map(|gp| (members[k], gp))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            base,
            base_expert: b.gp.clone(),
            augmented,
        })
    }

    pub fn predict(&self, xs: &DMatrix<f64>) -> Result<PredictiveDist> {
        let base = self.base_expert.predict(xs)?;
        let aug = pool::map_indexed(self.augmented.len(), |k| self.augmented[k].1.predict(xs))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let prior = self.base_expert.hp().signal_variance;
        let mut out = PredictiveDist::new(Vec::with_capacity(xs.nrows()), Vec::with_capacity(xs.nrows()));
        for t in 0..xs.nrows() {
            let moments: Vec<(f64, f64)> = aug.iter().map(|p| (p.means[t], p.variances[t])).collect();
            match fuse_grbcm((base.means[t], base.variances[t]), &moments) {
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
}

pub fn choose_base(ens: &ExpertEnsemble, choice: BaseChoice<'_>, seed: u64) -> Result<usize> {
    match choice {
        BaseChoice::Random => Ok(ChaCha8Rng::seed_from_u64(seed).random_range(0..ens.m())),
        BaseChoice::TopImportance(order) => order
            .first()
            .copied()
            .ok_or_else(|| Error::invalid("empty importance ordering")),
    }
}

/// GRBCM over the non-base experts in `subset`.
pub fn grbcm_aggregate(
    ens: &ExpertEnsemble,
    xs: &DMatrix<f64>,
    base_choice: BaseChoice<'_>,
    subset: &[usize],
    seed: u64,
) -> Result<PredictiveDist> {
    let base = choose_base(ens, base_choice, seed)?;
    GrbcmModel::build(ens, base, subset)?.predict(xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::ExpertModel;
    use crate::partition::{partition_kmeans, PartitionStrategy, Partitioning};
    use crate::Hyperparams;
    use approx::assert_relative_eq;

    fn ensemble(n: usize, m: usize, seed: u64) -> ExpertEnsemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::<f64>::from_fn(n, 1, |_, _| rng.random_range(0.0..1.0));
        let y = DVector::from_fn(n, |i, _| (8.0 * x[(i, 0)]).cos() + 0.1 * rng.random_range(-1.0..1.0));
        let p = partition_kmeans(&x, m, seed).unwrap();
        let hp = Hyperparams::new(1.0, vec![0.02], 0.01).unwrap();
        ExpertEnsemble::with_hyperparams(&x, &y, &p, hp).unwrap()
    }

    fn grid() -> DMatrix<f64> {
        DMatrix::from_fn(25, 1, |i, _| -0.2 + 0.06 * i as f64)
    }

    #[test]
    fn single_expert_is_returned_unchanged() {
        let ens = ensemble(40, 1, 1);
        let xs = grid();
        let own = ens.experts[0].gp.predict(&xs).unwrap();
        let poe = poe_aggregate(&ens, &xs, &[0], BetaScheme::Ones).unwrap();
        let bcm = bcm_aggregate(&ens, &xs, &[0], BetaScheme::Ones).unwrap();
        for t in 0..xs.nrows() {
            assert_relative_eq!(poe.means[t], own.means[t], max_relative = 1e-12, epsilon = 1e-14);
            assert_relative_eq!(poe.variances[t], own.variances[t], max_relative = 1e-12);
            assert_relative_eq!(bcm.means[t], own.means[t], max_relative = 1e-12, epsilon = 1e-14);
            assert_relative_eq!(bcm.variances[t], own.variances[t], max_relative = 1e-12);
        }
    }

    #[test]
    fn two_equal_variance_experts() {
        let (m, v, _) = fuse_product(&[1.0, 3.0], &[0.4, 0.4], &[1.0, 1.0]).unwrap();
        assert_relative_eq!(m, 2.0, max_relative = 1e-15);
        assert_relative_eq!(v, 0.2, max_relative = 1e-15);
    }

    #[test]
    fn uniform_weights_on_identical_experts_keep_variance() {
        let b = betas(BetaScheme::Uniform, &[0.3; 5], 1.0);
        let (m, v, _) = fuse_product(&[0.7; 5], &[0.3; 5], &b).unwrap();
        assert_relative_eq!(m, 0.7, max_relative = 1e-14);
        assert_relative_eq!(v, 0.3, max_relative = 1e-14);
    }

    #[test]
    fn zero_betas_return_prior() {
        let (m, v) = fuse_bcm(&[1.0, 2.0], &[0.1, 0.2], &[0.0, 0.0], 1.5).unwrap();
        assert_eq!(m, 0.0);
        assert_relative_eq!(v, 1.5, max_relative = 1e-15);
        assert!(fuse_product(&[1.0], &[0.1], &[0.0]).is_none());
    }

    #[test]
    fn bcm_two_expert_closed_form() {
        let (m1, v1, m2, v2, vp) = (0.4, 0.2, -0.1, 0.5, 1.1);
        let prec = 1.0 / v1 + 1.0 / v2 - 1.0 / vp;
        let mean = (m1 / v1 + m2 / v2) / prec;
        let (m, v) = fuse_bcm(&[m1, m2], &[v1, v2], &[1.0, 1.0], vp).unwrap();
        assert_relative_eq!(m, mean, max_relative = 1e-14);
        assert_relative_eq!(v, 1.0 / prec, max_relative = 1e-14);
    }

    #[test]
    fn diff_entropy_weights_are_clipped() {
        assert_eq!(diff_entropy(1.0, 2.0), 0.0);
        assert_relative_eq!(diff_entropy(1.0, (-2.0f64).exp()), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn poe_precision_adds_up() {
        let ens = ensemble(60, 4, 2);
        let xs = grid();
        let fused = poe_aggregate(&ens, &xs, &[0, 1, 2, 3], BetaScheme::Ones).unwrap();
        let each = ens.predict_all(&xs).unwrap();
        for t in 0..xs.nrows() {
            let sum: f64 = each.iter().map(|p| 1.0 / p.variances[t]).sum();
            assert_relative_eq!(1.0 / fused.variances[t], sum, max_relative = 1e-10);
        }
        let three = poe_aggregate(&ens, &xs, &[0, 1, 2], BetaScheme::Ones).unwrap();
        for t in 0..xs.nrows() {
            assert!(fused.variances[t] <= three.variances[t]);
        }
    }

    #[test]
    fn gpoe_uniform_is_m_times_poe_variance() {
        let ens = ensemble(60, 4, 3);
        let xs = grid();
        let poe = poe_aggregate(&ens, &xs, &[0, 1, 2, 3], BetaScheme::Ones).unwrap();
        let gpoe = poe_aggregate(&ens, &xs, &[0, 1, 2, 3], BetaScheme::Uniform).unwrap();
        for t in 0..xs.nrows() {
            assert_relative_eq!(gpoe.variances[t], 4.0 * poe.variances[t], max_relative = 1e-12);
            assert_relative_eq!(gpoe.means[t], poe.means[t], max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn rbcm_variances_positive() {
        let ens = ensemble(60, 5, 4);
        let xs = grid();
        let r = bcm_aggregate(&ens, &xs, &ens.all_indices(), BetaScheme::DiffEntropy).unwrap();
        assert!(r.variances.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn grbcm_two_partitions_is_augmented_expert() {
        let ens = ensemble(40, 2, 5);
        let xs = grid();
        let model = GrbcmModel::build(&ens, 0, &[0, 1]).unwrap();
        let out = model.predict(&xs).unwrap();
        let aug = model.augmented[0].1.predict(&xs).unwrap();
        for t in 0..xs.nrows() {
            assert_relative_eq!(out.means[t], aug.means[t], max_relative = 1e-12, epsilon = 1e-14);
            assert_relative_eq!(out.variances[t], aug.variances[t], max_relative = 1e-12);
        }
    }

    #[test]
    fn grbcm_identical_partitions_return_base() {
        let base = ensemble(20, 1, 6).experts[0].clone();
        let experts: Vec<ExpertModel> = (0..3)
            .map(|i| ExpertModel {
                index: i,
                ..base.clone()
            })
            .collect();
        let p = Partitioning::from_assignments(vec![0, 1, 2], 3, PartitionStrategy::Random, 0).unwrap();
        let ens = ExpertEnsemble::from_experts(experts, p).unwrap();
        let xs = grid();
        let out = grbcm_aggregate(&ens, &xs, BaseChoice::Random, &[0, 1, 2], 3).unwrap();
        let own = base.gp.predict(&xs).unwrap();
        for t in 0..xs.nrows() {
            assert_relative_eq!(out.means[t], own.means[t], max_relative = 1e-9, epsilon = 1e-12);
            assert_relative_eq!(out.variances[t], own.variances[t], max_relative = 1e-9);
        }
    }

    #[test]
    fn grbcm_matches_density_quotient() {
        // log of p_b2 * p_b3^b3 / p_b^(1 + b3 - 1) is quadratic in y; read its
        // coefficients off three evaluations.
        let base = (0.3, 0.5);
        let aug = [(0.1, 0.2), (0.45, 0.3)];
        let b3 = 0.5 * (0.5f64.ln() - 0.3f64.ln());
        let logn = |y: f64, (m, v): (f64, f64)| -0.5 * (y - m).powi(2) / v - 0.5 * v.ln();
        let logq = |y: f64| logn(y, aug[0]) + b3 * logn(y, aug[1]) - b3 * logn(y, base);
        let (f0, f1, fm) = (logq(0.0), logq(1.0), logq(-1.0));
        let a = 0.5 * (f1 + fm - 2.0 * f0); // -0.5 * precision
        let b = 0.5 * (f1 - fm); // precision * mean
        let prec = -2.0 * a;
        let (m, v) = fuse_grbcm(base, &aug).unwrap();
        assert_relative_eq!(v, 1.0 / prec, max_relative = 1e-12);
        assert_relative_eq!(m, b / prec, max_relative = 1e-12);
    }

    #[test]
    fn grbcm_needs_two_partitions() {
        let ens = ensemble(20, 1, 7);
        assert!(grbcm_aggregate(&ens, &grid(), BaseChoice::Random, &[0], 0).is_err());
    }

    #[test]
    fn top_importance_picks_first() {
        let ens = ensemble(40, 4, 8);
        assert_eq!(choose_base(&ens, BaseChoice::TopImportance(&[2, 0, 1, 3]), 0).unwrap(), 2);
    }
}
