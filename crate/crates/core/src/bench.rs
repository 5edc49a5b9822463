//! End-to-end experiment runner: data, partitioning, ensemble training, expert
//! selection, aggregation and metrics, with JSON and CSV reports.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ci_agg::{bcm_aggregate, poe_aggregate, BaseChoice, BetaScheme, GrbcmModel};
use crate::data_io::{load_delimited, synth_dataset, Dataset, Split};
use crate::experts::{train_ensemble, ExpertEnsemble};
use crate::ggm::{ExpertGraph, GlassoOptions, Scaling, DEFAULT_LAMBDA};
use crate::gp::{fit, FitOptions};
use crate::metrics::{mae, msll, smse};
use crate::npae::{npae_aggregate_with, NpaeOptions};
use crate::partition::{partition_kmeans, partition_random, PartitionStrategy};
use crate::{Error, Hyperparams, PredictiveDist, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FullGp,
    Poe,
    Gpoe,
    Bcm,
    Rbcm,
    Grbcm,
    Npae,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::FullGp => "fullgp",
            Method::Poe => "poe",
            Method::Gpoe => "gpoe",
            Method::Bcm => "bcm",
            Method::Rbcm => "rbcm",
            Method::Grbcm => "grbcm",
            Method::Npae => "npae",
        }
    }

    /// Report type column: `GP` for the full GP, `D` for dependent-expert
    /// aggregation, `CI` for conditional-independence aggregation.
    pub fn kind(self) -> &'static str {
        match self {
            Method::FullGp => "GP",
            Method::Npae => "D",
            _ => "CI",
        }
    }
}

/// A method with optional expert selection, written `npae`, `npae*` or
/// `npae*(0.5)` where the number overrides the run's selection rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub starred: bool,
    pub alpha: Option<f64>,
}

impl MethodSpec {
    pub fn plain(method: Method) -> Self {
        Self {
            method,
            starred: false,
            alpha: None,
        }
    }

    pub fn starred(method: Method, alpha: Option<f64>) -> Self {
        Self {
            method,
            starred: true,
            alpha,
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.method.name())?;
        if self.starred {
            f.write_str("*")?;
        }
        if let Some(a) = self.alpha {
            write!(f, "({a})")?;
        }
        Ok(())
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (head, alpha) = match s.find('(') {
            Some(i) => {
                let inner = s[i + 1..]
                    .strip_suffix(')')
                    .ok_or_else(|| Error::invalid(format!("unbalanced parenthesis in method '{s}'")))?;
                let a: f64 = inner
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad selection rate in method '{s}'")))?;
                (s[..i].trim().to_string(), Some(a))
            }
            None => (s.clone(), None),
        };
        let (name, starred) = match head.strip_suffix('*') {
            Some(n) => (n, true),
            None => (head.as_str(), false),
        };
        if alpha.is_some() && !starred {
            return Err(Error::invalid(format!("selection rate given for unstarred method '{s}'")));
        }
        if let Some(a) = alpha {
            crate::ggm::selection_size(1, a)?;
        }
        let method = match name {
            "fullgp" | "gp" => Method::FullGp,
            "poe" => Method::Poe,
            "gpoe" => Method::Gpoe,
            "bcm" => Method::Bcm,
            "rbcm" => Method::Rbcm,
            "grbcm" => Method::Grbcm,
            "npae" => Method::Npae,
            other => return Err(Error::invalid(format!("unknown method '{other}'"))),
        };
        if starred && method == Method::FullGp {
            return Err(Error::invalid("the full GP has no expert selection"));
        }
        Ok(Self { method, starred, alpha })
    }
}

pub fn parse_methods(list: &str) -> Result<Vec<MethodSpec>> {
    let specs = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<MethodSpec>>>()?;
    if specs.is_empty() {
        return Err(Error::invalid("no methods requested"));
    }
    Ok(specs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic {
        n: usize,
        n_test: usize,
        noise_sd: f64,
    },
    File {
        path: PathBuf,
        /// Defaults to the last column.
        target_column: Option<usize>,
        train_fraction: f64,
    },
}

impl DataSource {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Synthetic { n, n_test, noise_sd } => synth_dataset(*n, *n_test, *noise_sd, seed),
            DataSource::File {
                path,
                target_column,
                train_fraction,
            } => load_delimited(path, *target_column, Split::Fraction(*train_fraction), seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub experts: usize,
    pub partition: PartitionStrategy,
    pub methods: Vec<MethodSpec>,
    pub alpha: f64,
    pub lambda: f64,
    /// Scaling of the prediction covariance fed to the graphical lasso.
    pub scaling: Scaling,
    pub seed: u64,
    pub restarts: usize,
    pub gpoe_beta: BetaScheme,
    pub literal_kaa_diagonal: bool,
    /// When false every timing is reported as zero, making reports of
    /// identical runs byte-identical.
    pub record_timings: bool,
    /// Estimate the expert graph even when no method needs it.
    pub force_graph: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic {
                n: 5000,
                n_test: 500,
                noise_sd: crate::data_io::SYNTH_NOISE_SD,
            },
            experts: 10,
            partition: PartitionStrategy::Kmeans,
            methods: vec![MethodSpec::plain(Method::Npae), MethodSpec::starred(Method::Npae, None)],
            alpha: 0.8,
            lambda: DEFAULT_LAMBDA,
            scaling: Scaling::default(),
            seed: 0,
            restarts: 1,
            gpoe_beta: BetaScheme::Uniform,
            literal_kaa_diagonal: false,
            record_timings: true,
            force_graph: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::invalid("need at least one expert"));
        }
        crate::ggm::selection_size(1, self.alpha)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods requested"));
        }
        Ok(())
    }

    fn needs_graph(&self) -> bool {
        self.force_graph || self.methods.iter().any(|m| m.starred)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionInfo {
    pub lambda: f64,
    pub alpha: f64,
    pub importance: Vec<f64>,
    pub order: Vec<usize>,
    pub selected: Vec<usize>,
    pub degenerate: Vec<usize>,
    pub glasso_converged: bool,
    pub glasso_sweeps: usize,
    pub selection_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub smse: Option<f64>,
    pub msll: Option<f64>,
    pub mae: Option<f64>,
    pub train_s: f64,
    pub predict_s: f64,
    /// Test points where aggregation fell back to the prior.
    pub failed_points: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub hyperparams: Option<Hyperparams>,
    pub train_s: f64,
    pub selection: Option<SelectionInfo>,
    pub rows: Vec<MethodRow>,
}

impl ExperimentReport {
    pub fn row(&self, label: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == label)
    }
}

/// Everything a run produces, including the estimated graph and the
/// per-method predictive distributions.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: ExperimentReport,
    pub dataset: Dataset,
    pub ensemble: Option<ExpertEnsemble>,
    pub graph: Option<ExpertGraph>,
    pub predictions: Vec<Option<PredictiveDist>>,
}

struct Clock(Option<Instant>);

impl Clock {
    fn start(enabled: bool) -> Self {
        Clock(enabled.then(Instant::now))
    }

    fn seconds(&self) -> f64 {
        self.0.map_or(0.0, |t| t.elapsed().as_secs_f64())
    }
}

fn failed_row(spec: &MethodSpec, reason: String) -> MethodRow {
    MethodRow {
        method: spec.to_string(),
        kind: spec.method.kind().to_string(),
        smse: None,
        msll: None,
        mae: None,
        train_s: 0.0,
        predict_s: 0.0,
        failed_points: 0,
        failure: Some(reason),
    }
}

fn score(
    spec: &MethodSpec,
    data: &Dataset,
    pred: &PredictiveDist,
    noise: f64,
    train_s: f64,
    predict_s: f64,
) -> MethodRow {
    let y = data.y_test.as_slice();
    let (tm, tv) = data.train_target_stats();
    let obs_var: Vec<f64> = pred.variances.iter().map(|v| v + noise).collect();
    let s = smse(y, &pred.means);
    let l = msll(y, &pred.means, &obs_var, tm, tv);
    let a = mae(y, &pred.means);
    let failure = [s.as_ref().err(), l.as_ref().err(), a.as_ref().err()]
        .into_iter()
        .flatten()
        .map(|e| e.to_string())
        .next();
    MethodRow {
        method: spec.to_string(),
        kind: spec.method.kind().to_string(),
        smse: s.ok(),
        msll: l.ok(),
        mae: a.ok(),
        train_s,
        predict_s,
        failed_points: pred.failures.len(),
        failure,
    }
}

/// Runs one experiment. Errors are returned only for invalid configurations
/// and unreadable data; failures of individual methods are recorded in their
/// report rows.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let data = config.data.load(config.seed)?;
    let timed = config.record_timings;
    let fit_opts = FitOptions {
        restarts: config.restarts.max(1),
        seed: config.seed,
        ..Default::default()
    };
    let init = Hyperparams::default_for(&data.x_train);

    let clock = Clock::start(timed);
    let partitioning = match config.partition {
        PartitionStrategy::Kmeans => partition_kmeans(&data.x_train, config.experts, config.seed),
        PartitionStrategy::Random => partition_random(data.n_train(), config.experts, config.seed),
    }?;
    let needs_ensemble = config.methods.iter().any(|m| m.method != Method::FullGp) || config.force_graph;
    let ensemble = if needs_ensemble {
        Some(train_ensemble(&data.x_train, &data.y_train, &partitioning, &init, &fit_opts).map_err(|e| e.to_string()))
    } else {
        None
    };
    let train_s = clock.seconds();

    let mut graph_time = 0.0;
    let graph: Option<std::result::Result<ExpertGraph, String>> = match &ensemble {
        Some(Ok(ens)) if config.needs_graph() => {
            let clock = Clock::start(timed);
            let g = ExpertGraph::build(ens, &data.x_test, config.scaling, config.lambda, config.alpha, &GlassoOptions::default())
                .map_err(|e| e.to_string());
            graph_time = clock.seconds();
            Some(g)
        }
        _ => None,
    };

    let npae_opts = NpaeOptions {
        literal_diagonal: config.literal_kaa_diagonal,
    };
    let mut rows = Vec::with_capacity(config.methods.len());
    let mut predictions = Vec::with_capacity(config.methods.len());
    for spec in &config.methods {
        if spec.method == Method::FullGp {
            let clock = Clock::start(timed);
            let model = fit(&data.x_train, &data.y_train, &init, &fit_opts);
            let fit_s = clock.seconds();
            let clock = Clock::start(timed);
            match model.and_then(|m| m.predict(&data.x_test).map(|p| (m, p))) {
                Ok((m, p)) => {
                    let predict_s = clock.seconds();
                    rows.push(score(spec, &data, &p, m.hp().noise_variance, fit_s, predict_s));
                    predictions.push(Some(p));
                }
                Err(e) => {
                    rows.push(failed_row(spec, e.to_string()));
                    predictions.push(None);
                }
            }
            continue;
        }

        let ens = match &ensemble {
            Some(Ok(ens)) => ens,
            Some(Err(e)) => {
                rows.push(failed_row(spec, format!("ensemble training failed: {e}")));
                predictions.push(None);
                continue;
            }
            None => unreachable!("ensemble is trained whenever an aggregation method is requested"),
        };
        let (subset, order, extra_s) = if spec.starred {
            match &graph {
                Some(Ok(g)) => match g.select(spec.alpha.unwrap_or(config.alpha)) {
                    Ok(sel) => (sel, Some(g.order.as_slice()), graph_time),
                    Err(e) => {
                        rows.push(failed_row(spec, e.to_string()));
                        predictions.push(None);
                        continue;
                    }
                },
                Some(Err(e)) => {
                    rows.push(failed_row(spec, format!("expert graph failed: {e}")));
                    predictions.push(None);
                    continue;
                }
                None => unreachable!("graph is built whenever a starred method is requested"),
            }
        } else {
            (ens.all_indices(), None, 0.0)
        };

        let xs = &data.x_test;
        let mut method_train_s = train_s;
        let clock = Clock::start(timed);
        let result = match spec.method {
            Method::Poe => poe_aggregate(ens, xs, &subset, BetaScheme::Ones),
            Method::Gpoe => poe_aggregate(ens, xs, &subset, config.gpoe_beta),
            Method::Bcm => bcm_aggregate(ens, xs, &subset, BetaScheme::Ones),
            Method::Rbcm => bcm_aggregate(ens, xs, &subset, BetaScheme::DiffEntropy),
            Method::Npae => npae_aggregate_with(ens, xs, &subset, npae_opts),
            Method::Grbcm => {
                let choice = order.map_or(BaseChoice::Random, BaseChoice::TopImportance);
                let built = crate::ci_agg::choose_base(ens, choice, config.seed)
                    .and_then(|b| GrbcmModel::build(ens, b, &subset));
                method_train_s += clock.seconds();
                let clock = Clock::start(timed);
                let out = built.and_then(|m| m.predict(xs));
                let predict_s = clock.seconds() + extra_s;
                push_result(&mut rows, &mut predictions, spec, &data, ens, out, method_train_s, predict_s);
                continue;
            }
            Method::FullGp => unreachable!(),
        };
        let predict_s = clock.seconds() + extra_s;
        push_result(&mut rows, &mut predictions, spec, &data, ens, result, method_train_s, predict_s);
    }

    let selection = match &graph {
        Some(Ok(g)) => Some(SelectionInfo {
            lambda: g.lambda,
            alpha: g.alpha,
            importance: g.importance.clone(),
            order: g.order.clone(),
            selected: g.selected.clone(),
            degenerate: g.degenerate.clone(),
            glasso_converged: g.converged,
            glasso_sweeps: g.sweeps,
            selection_s: graph_time,
        }),
        _ => None,
    };
    let hyperparams = match &ensemble {
        Some(Ok(e)) => Some(e.hp.clone()),
        _ => None,
    };
    let report = ExperimentReport {
        config: config.clone(),
        dataset: DatasetSummary {
            n_train: data.n_train(),
            n_test: data.n_test(),
            dim: data.dim(),
        },
        hyperparams,
        train_s,
        selection,
        rows,
    };
    Ok(RunOutput {
        report,
        dataset: data,
        ensemble: ensemble.and_then(|e| e.ok()),
        graph: graph.and_then(|g| g.ok()),
        predictions,
    })
}

#[allow(clippy::too_many_arguments)]
fn push_result(
    rows: &mut Vec<MethodRow>,
    predictions: &mut Vec<Option<PredictiveDist>>,
    spec: &MethodSpec,
    data: &Dataset,
    ens: &ExpertEnsemble,
    result: Result<PredictiveDist>,
    train_s: f64,
    predict_s: f64,
) {
    match result {
        Ok(p) => {
            rows.push(score(spec, data, &p, ens.hp.noise_variance, train_s, predict_s));
            predictions.push(Some(p));
        }
        Err(e) => {
            rows.push(failed_row(spec, e.to_string()));
            predictions.push(None);
        }
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run(config).map(|o| o.report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(Error::invalid(format!("unknown report format '{other}'"))),
        }
    }
}

pub const CSV_HEADER: &str = "method,type,smse,msll,mae,train_s,predict_s";

pub fn report_to_json(report: &ExperimentReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn report_from_json(text: &str) -> Result<ExperimentReport> {
    Ok(serde_json::from_str(text)?)
}

pub fn report_to_csv(report: &ExperimentReport) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method,
            r.kind,
            cell(r.smse),
            cell(r.msll),
            cell(r.mae),
            r.train_s,
            r.predict_s
        ));
    }
    out
}

pub fn render_report(report: &ExperimentReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => report_to_json(report),
        ReportFormat::Csv => Ok(report_to_csv(report)),
    }
}

pub fn emit_report(report: &ExperimentReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = render_report(report, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
