//! Distributed Gaussian-process regression.
//!
//! Local GP experts are trained on disjoint partitions of the training set with
//! shared hyperparameters, then fused either under a conditional-independence
//! assumption (PoE/GPoE/BCM/RBCM/GRBCM) or by modelling the dependence between
//! their predictions (NPAE). A graphical-lasso estimate of the precision matrix
//! over expert predictions ranks experts by interaction strength so that weak
//! experts can be pruned before aggregation.

pub mod bench;
pub mod ci_agg;
pub mod data_io;
pub mod error;
pub mod experts;
pub mod ggm;
pub mod gp;
pub mod kernel;
pub mod linalg;
pub mod metrics;
pub mod npae;
mod optim;
pub mod partition;
mod pool;

pub use error::{Error, Result};
pub use kernel::Hyperparams;

use serde::{Deserialize, Serialize};

/// Per-test-point Gaussian predictive moments.
///
/// `failures` lists test-point indices where aggregation fell back to the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDist {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<usize>,
}

impl PredictiveDist {
    pub fn new(means: Vec<f64>, variances: Vec<f64>) -> Self {
        debug_assert_eq!(means.len(), variances.len());
        Self {
            means,
            variances,
            failures: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}
