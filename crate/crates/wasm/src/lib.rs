//! WebAssembly bindings for the browser demo: train experts on the 1-D
//! synthetic curve, draw aggregated predictive bands, inspect the expert graph.

use dgp_core::bench::{Method, MethodSpec};
use dgp_core::ci_agg::{bcm_aggregate, grbcm_aggregate, poe_aggregate, BaseChoice, BetaScheme};
use dgp_core::data_io::{synth_dataset, synth_f, Dataset};
use dgp_core::experts::{train_ensemble, ExpertEnsemble};
use dgp_core::ggm::{ExpertGraph, GlassoOptions, Scaling};
use dgp_core::gp::FitOptions;
use dgp_core::metrics::{msll, smse};
use dgp_core::npae::npae_aggregate;
use dgp_core::partition::partition_kmeans;
use dgp_core::{Hyperparams, PredictiveDist};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Training<'a> {
    x: Vec<f64>,
    y: Vec<f64>,
    expert: &'a [usize],
    experts: usize,
    hyperparams: &'a Hyperparams,
}

#[derive(Serialize)]
struct Curve {
    x: Vec<f64>,
    truth: Vec<f64>,
    mean: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    subset: Vec<usize>,
    smse: f64,
    msll: f64,
}

#[derive(Serialize)]
struct Graph {
    importance: Vec<f64>,
    order: Vec<usize>,
    selected: Vec<usize>,
    edges: Vec<dgp_core::ggm::Edge>,
    centers: Vec<f64>,
}

#[wasm_bindgen]
pub struct Demo {
    data: Dataset,
    ensemble: ExpertEnsemble,
    seed: u64,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[wasm_bindgen]
impl Demo {
    /// Samples `n` noisy training points and trains `experts` local GPs with
    /// shared hyperparameters on K-means partitions.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, experts: usize, noise_sd: f64, seed: u32) -> Result<Demo, String> {
        let seed = u64::from(seed);
        let data = synth_dataset(n, 200, noise_sd, seed).map_err(err)?;
        let partitioning = partition_kmeans(&data.x_train, experts, seed).map_err(err)?;
        let init = Hyperparams::default_for(&data.x_train);
        let opts = FitOptions {
            seed,
            ..Default::default()
        };
        let ensemble = train_ensemble(&data.x_train, &data.y_train, &partitioning, &init, &opts).map_err(err)?;
        Ok(Demo { data, ensemble, seed })
    }

    fn raw_x(&self, v: f64) -> f64 {
        v * self.data.norm.x_std[0] + self.data.norm.x_mean[0]
    }

    fn raw_y(&self, v: f64) -> f64 {
        v * self.data.norm.y_std + self.data.norm.y_mean
    }

    fn graph(&self, lambda: f64, alpha: f64) -> Result<ExpertGraph, String> {
        ExpertGraph::build(
            &self.ensemble,
            &self.data.x_test,
            Scaling::Covariance,
            lambda,
            alpha,
            &GlassoOptions::default(),
        )
        .map_err(err)
    }

    /// Training inputs, targets and expert assignments in original units.
    #[wasm_bindgen(js_name = trainingJson)]
    pub fn training_json(&self) -> String {
        let t = Training {
            x: self.data.x_train.iter().map(|&v| self.raw_x(v)).collect(),
            y: self.data.y_train.iter().map(|&v| self.raw_y(v)).collect(),
            expert: &self.ensemble.partitioning.assignments,
            experts: self.ensemble.m(),
            hyperparams: &self.ensemble.hp,
        };
        serde_json::to_string(&t).unwrap_or_default()
    }

    /// Aggregated mean and 95% band of the latent function on the test grid.
    /// `method` is a label such as `gpoe`, `rbcm*` or `npae*(0.5)`.
    #[wasm_bindgen(js_name = predictJson)]
    pub fn predict_json(&self, method: &str, lambda: f64, alpha: f64) -> Result<String, String> {
        let spec: MethodSpec = method.parse().map_err(err)?;
        let ens = &self.ensemble;
        let xs = &self.data.x_test;
        let (subset, order) = if spec.starred {
            let g = self.graph(lambda, spec.alpha.unwrap_or(alpha))?;
            (g.selected, Some(g.order))
        } else {
            (ens.all_indices(), None)
        };
        let pred: PredictiveDist = match spec.method {
            Method::Poe => poe_aggregate(ens, xs, &subset, BetaScheme::Ones),
            Method::Gpoe => poe_aggregate(ens, xs, &subset, BetaScheme::Uniform),
            Method::Bcm => bcm_aggregate(ens, xs, &subset, BetaScheme::Ones),
            Method::Rbcm => bcm_aggregate(ens, xs, &subset, BetaScheme::DiffEntropy),
            Method::Grbcm => {
                let choice = order.as_deref().map_or(BaseChoice::Random, BaseChoice::TopImportance);
                grbcm_aggregate(ens, xs, choice, &subset, self.seed)
            }
            Method::Npae => npae_aggregate(ens, xs, &subset),
            Method::FullGp => return Err("the demo aggregates experts only".into()),
        }
        .map_err(err)?;

        let y = self.data.y_test.as_slice();
        let (tm, tv) = self.data.train_target_stats();
        let noise = ens.hp.noise_variance;
        let obs: Vec<f64> = pred.variances.iter().map(|v| v + noise).collect();
        let sd = self.data.norm.y_std;
        let x: Vec<f64> = xs.iter().map(|&v| self.raw_x(v)).collect();
        let curve = Curve {
            truth: x.iter().map(|&v| synth_f(v)).collect(),
            mean: pred.means.iter().map(|&m| self.raw_y(m)).collect(),
            lower: pred
                .means
                .iter()
                .zip(&pred.variances)
                .map(|(&m, &v)| self.raw_y(m) - 1.96 * v.sqrt() * sd)
                .collect(),
            upper: pred
                .means
                .iter()
                .zip(&pred.variances)
                .map(|(&m, &v)| self.raw_y(m) + 1.96 * v.sqrt() * sd)
                .collect(),
            x,
            subset,
            smse: smse(y, &pred.means).map_err(err)?,
            msll: msll(y, &pred.means, &obs, tm, tv).map_err(err)?,
        };
        serde_json::to_string(&curve).map_err(err)
    }

    /// Estimated expert graph: importance, selection and non-zero edges.
    #[wasm_bindgen(js_name = graphJson)]
    pub fn graph_json(&self, lambda: f64, alpha: f64) -> Result<String, String> {
        let g = self.graph(lambda, alpha)?;
        let centers = self
            .ensemble
            .experts
            .iter()
            .map(|e| self.raw_x(e.x().column(0).mean()))
            .collect();
        let out = Graph {
            edges: g.edges(),
            importance: g.importance,
            order: g.order,
            selected: g.selected,
            centers,
        };
        serde_json::to_string(&out).map_err(err)
    }
}
