use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use dgp_core::bench::{parse_methods, render_report, run, DataSource, ExperimentConfig, ReportFormat};
use dgp_core::ci_agg::BetaScheme;
use dgp_core::data_io::SYNTH_NOISE_SD;
use dgp_core::ggm::{Scaling, DEFAULT_LAMBDA};
use dgp_core::partition::PartitionStrategy;

/// Benchmark distributed GP aggregation methods on synthetic or tabular data.
#[derive(Debug, Parser)]
#[command(name = "dgp-bench", version)]
struct Args {
    /// `synthetic`, or a comma/whitespace-delimited numeric file.
    #[arg(long, default_value = "synthetic")]
    data: String,

    /// Training points for synthetic data.
    #[arg(long, default_value_t = 5000)]
    n: usize,

    /// Test points for synthetic data (defaults to n / 10).
    #[arg(long)]
    ntest: Option<usize>,

    /// Standard deviation of the synthetic target noise.
    #[arg(long, default_value_t = SYNTH_NOISE_SD)]
    noise_sd: f64,

    /// Zero-based target column of a data file (defaults to the last).
    #[arg(long)]
    target_column: Option<usize>,

    /// Fraction of file rows used for training.
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,

    /// Number of experts M.
    #[arg(long, default_value_t = 10)]
    experts: usize,

    #[arg(long, default_value = "kmeans")]
    partition: PartitionStrategy,

    /// Comma list from fullgp, poe, gpoe, bcm, rbcm, grbcm, npae; a trailing
    /// `*` selects experts first, `*(0.5)` also overrides the rate.
    #[arg(long, default_value = "gpoe,rbcm,grbcm,npae,gpoe*,rbcm*,grbcm*,npae*")]
    methods: String,

    /// Fraction of experts kept by starred methods.
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,

    /// Graphical-lasso penalty.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,

    /// Scaling of the prediction covariance: covariance or correlation.
    #[arg(long, default_value = "covariance")]
    scaling: Scaling,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Hyperparameter optimiser starts.
    #[arg(long, default_value_t = 1)]
    restarts: usize,

    /// Weights for gpoe: uniform, ones or diff_entropy.
    #[arg(long, default_value = "uniform")]
    gpoe_beta: BetaScheme,

    /// Leave the noise variance out of the expert covariance blocks.
    #[arg(long)]
    literal_kaa_diagonal: bool,

    /// Report all timings as zero so reruns are byte-identical.
    #[arg(long)]
    no_timings: bool,

    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long, default_value = "json")]
    format: ReportFormat,

    /// Write the estimated precision matrix here, plus `<stem>.edges.csv`.
    #[arg(long)]
    dump_graph: Option<PathBuf>,
}

impl Args {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let data = if self.data == "synthetic" {
            DataSource::Synthetic {
                n: self.n,
                n_test: self.ntest.unwrap_or((self.n / 10).max(2)),
                noise_sd: self.noise_sd,
            }
        } else {
            DataSource::File {
                path: PathBuf::from(&self.data),
                target_column: self.target_column,
                train_fraction: self.train_fraction,
            }
        };
        let config = ExperimentConfig {
            data,
            experts: self.experts,
            partition: self.partition,
            methods: parse_methods(&self.methods)?,
            alpha: self.alpha,
            lambda: self.lambda,
            scaling: self.scaling,
            seed: self.seed,
            restarts: self.restarts,
            gpoe_beta: self.gpoe_beta,
            literal_kaa_diagonal: self.literal_kaa_diagonal,
            record_timings: !self.no_timings,
            force_graph: self.dump_graph.is_some(),
        };
        config.validate()?;
        Ok(config)
    }
}

fn main() -> ExitCode {
    match try_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn try_main() -> anyhow::Result<()> {
    let args = Args::parse();
    let config = args.config()?;
    let out = run(&config)?;

    if let Some(path) = &args.dump_graph {
        match &out.graph {
            Some(g) => {
                let edges = g.write_csv(path)?;
                eprintln!("graph written to {} and {}", path.display(), edges.display());
            }
            None => eprintln!("warning: the expert graph could not be estimated; nothing dumped"),
        }
    }

    for row in &out.report.rows {
        if let Some(reason) = &row.failure {
            eprintln!("warning: {} failed: {reason}", row.method);
        }
    }

    let text = render_report(&out.report, args.format)?;
    match &args.out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
