//! Local GP experts trained on partitions with shared hyperparameters.

use nalgebra::{DMatrix, DVector};

use crate::gp::{fit_shared, FitOptions, GpModel};
use crate::partition::Partitioning;
use crate::{pool, Error, Hyperparams, PredictiveDist, Result};

/// One local GP. `rows` are the indices of its training points in the full
/// training set.
#[derive(Debug, Clone)]
pub struct ExpertModel {
    pub index: usize,
    pub rows: Vec<usize>,
    pub gp: GpModel,
}

impl ExpertModel {
    pub fn x(&self) -> &DMatrix<f64> {
        self.gp.x()
    }

    pub fn y(&self) -> &DVector<f64> {
        self.gp.y()
    }

    pub fn n(&self) -> usize {
        self.gp.n()
    }
}

#[derive(Debug, Clone)]
pub struct ExpertEnsemble {
    pub experts: Vec<ExpertModel>,
    pub hp: Hyperparams,
    pub partitioning: Partitioning,
}

fn gather(x: &DMatrix<f64>, y: &DVector<f64>, rows: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let xi = DMatrix::from_fn(rows.len(), x.ncols(), |r, d| x[(rows[r], d)]);
    let yi = DVector::from_fn(rows.len(), |r, _| y[rows[r]]);
    (xi, yi)
}

fn check_data(x: &DMatrix<f64>, y: &DVector<f64>, partitioning: &Partitioning) -> Result<()> {
    partitioning.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: y.len(),
        });
    }
    if partitioning.assignments.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: partitioning.assignments.len(),
        });
    }
    Ok(())
}

/// Maximises the sum of per-partition log marginal likelihoods and factorises
/// every expert under the resulting hyperparameters.
pub fn train_ensemble(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    partitioning: &Partitioning,
    init: &Hyperparams,
    opts: &FitOptions,
) -> Result<ExpertEnsemble> {
    check_data(x, y, partitioning)?;
    let parts: Vec<_> = partitioning.members().iter().map(|rows| gather(x, y, rows)).collect();
    let (hp, _) = fit_shared(&parts, init, opts)?;
    ExpertEnsemble::with_hyperparams(x, y, partitioning, hp)
}

impl ExpertEnsemble {
    /// Factorises one expert per partition under fixed `hp`, without training.
    pub fn with_hyperparams(
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        partitioning: &Partitioning,
        hp: Hyperparams,
    ) -> Result<Self> {
        check_data(x, y, partitioning)?;
        let members = partitioning.members();
        let built = pool::map_indexed(members.len(), |i| {
            let (xi, yi) = gather(x, y, &members[i]);
            GpModel::new(xi, yi, hp.clone()).map(|gp| ExpertModel {
                index: i,
                rows: members[i].clone(),
                gp,
            })
        });
        let experts = built.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Self {
            experts,
            hp,
            partitioning: partitioning.clone(),
        })
    }

    /// Assembles an ensemble from explicit experts (e.g. with overlapping rows).
    pub fn from_experts(experts: Vec<ExpertModel>, partitioning: Partitioning) -> Result<Self> {
        let hp = experts
            .first()
            .map(|e| e.gp.hp().clone())
            .ok_or_else(|| Error::invalid("ensemble needs at least one expert"))?;
        if experts.iter().any(|e| e.gp.hp() != &hp) {
            return Err(Error::invalid("experts must share hyperparameters"));
        }
        Ok(Self {
            experts,
            hp,
            partitioning,
        })
    }

    pub fn m(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.hp.dim()
    }

    pub fn per_expert_lml(&self) -> Vec<f64> {
        self.experts.iter().map(|e| e.gp.log_marginal_likelihood()).collect()
    }

    /// Predictions of every expert at `xs`, indexed by expert.
    pub fn predict_all(&self, xs: &DMatrix<f64>) -> Result<Vec<PredictiveDist>> {
        pool::map_indexed(self.m(), |i| expert_predict(&self.experts[i], xs))
            .into_iter()
            .collect()
    }

    pub(crate) fn check_subset(&self, subset: &[usize]) -> Result<()> {
        if subset.is_empty() {
            return Err(Error::EmptySubset);
        }
        if let Some(&bad) = subset.iter().find(|&&i| i >= self.m()) {
            return Err(Error::invalid(format!("expert {bad} out of range for {} experts", self.m())));
        }
        Ok(())
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.m()).collect()
    }
}

/// Latent mean and variance of a single expert.
pub fn expert_predict(e: &ExpertModel, xs: &DMatrix<f64>) -> Result<PredictiveDist> {
    e.gp.predict(xs)
}

/// Weights `gamma_i = k_i*^T (K_i + noise I)^-1` of the expert's linear
/// estimator at `point`.
pub fn expert_gamma(e: &ExpertModel, point: &[f64]) -> Result<DVector<f64>> {
    e.gp.gamma(point)
}
