//! Synthetic data, delimited-file ingestion and train-statistics normalisation.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-column training statistics used to standardise inputs and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn column_stats(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    // Constant columns are centred but not scaled.
    (mean, if sd > 0.0 && sd.is_finite() { sd } else { 1.0 })
}

impl NormStats {
    pub fn from_train(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let (x_mean, x_std) = (0..x.ncols()).map(|d| column_stats(x.column(d).iter().copied())).unzip();
        let (y_mean, y_std) = column_stats(y.iter().copied());
        Self {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }
    }

    pub fn normalize_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |r, d| (x[(r, d)] - self.x_mean[d]) / self.x_std[d])
    }

    pub fn normalize_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.y_mean) / self.y_std)
    }

    pub fn denormalize_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.y_std + self.y_mean)
    }
}

/// Normalised train/test split together with the statistics used.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x_train: DMatrix<f64>,
    pub y_train: DVector<f64>,
    pub x_test: DMatrix<f64>,
    pub y_test: DVector<f64>,
    pub norm: NormStats,
}

impl Dataset {
    /// Normalises both splits with statistics of the raw training split.
    pub fn from_raw(x_train: DMatrix<f64>, y_train: DVector<f64>, x_test: DMatrix<f64>, y_test: DVector<f64>) -> Result<Self> {
        if x_train.nrows() == 0 {
            return Err(Error::invalid("training split is empty"));
        }
        if x_train.nrows() != y_train.len() || x_test.nrows() != y_test.len() {
            return Err(Error::invalid("row counts of inputs and targets differ"));
        }
        if x_test.ncols() != x_train.ncols() {
            return Err(Error::DimensionMismatch {
                expected: x_train.ncols(),
                found: x_test.ncols(),
            });
        }
        let norm = NormStats::from_train(&x_train, &y_train);
        Ok(Self {
            x_train: norm.normalize_x(&x_train),
            y_train: norm.normalize_y(&y_train),
            x_test: norm.normalize_x(&x_test),
            y_test: norm.normalize_y(&y_test),
            norm,
        })
    }

    pub fn n_train(&self) -> usize {
        self.x_train.nrows()
    }

    pub fn n_test(&self) -> usize {
        self.x_test.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x_train.ncols()
    }

    /// Mean and population variance of the (normalised) training targets.
    pub fn train_target_stats(&self) -> (f64, f64) {
        crate::metrics::mean_var(self.y_train.as_slice())
    }
}

/// `5x^2 sin(12x) + (x^3 - 0.5) sin(3x - 0.5) + 4 cos(2x)`
pub fn synth_f(x: f64) -> f64 {
    5.0 * x * x * (12.0 * x).sin() + (x.powi(3) - 0.5) * (3.0 * x - 0.5).sin() + 4.0 * (2.0 * x).cos()
}

pub const SYNTH_NOISE_SD: f64 = 0.2;

/// Raw (unnormalised) synthetic samples: uniform training inputs on `[0, 1]`
/// with Gaussian target noise, noiseless equispaced test inputs on `[-0.2, 1.2]`.
pub fn synth_raw(n: usize, n_test: usize, noise_sd: f64, seed: u64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::invalid("need at least one training point"));
    }
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::invalid(format!("noise sd: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let e = noise.sample(&mut rng);
            if noise_sd == 0.0 {
                synth_f(x)
            } else {
                synth_f(x) + e
            }
        })
        .collect();
    let xt: Vec<f64> = (0..n_test)
        .map(|t| {
            if n_test == 1 {
                0.5
            } else {
                -0.2 + 1.4 * t as f64 / (n_test - 1) as f64
            }
        })
        .collect();
    let yt: Vec<f64> = xt.iter().map(|&x| synth_f(x)).collect();
    Ok((xs, ys, xt, yt))
}

pub fn synth_dataset(n: usize, n_test: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    let (xs, ys, xt, yt) = synth_raw(n, n_test, noise_sd, seed)?;
    Dataset::from_raw(
        DMatrix::from_column_slice(n, 1, &xs),
        DVector::from_vec(ys),
        DMatrix::from_column_slice(n_test, 1, &xt),
        DVector::from_vec(yt),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Split {
    /// Seeded shuffle, then the leading `floor(f * rows)` rows train.
    Fraction(f64),
    /// The first `n` rows as stored train, the rest test.
    Head(usize),
}

/// A rectangular numeric table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Option<Vec<String>>,
    pub rows: Vec<Vec<f64>>,
}

fn split_cells(line: &str) -> Vec<&str> {
    if line.contains(',') {
        line.split(',').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

/// Parses comma- or whitespace-delimited text. A first line containing any
/// non-numeric cell is taken as a header. Rows and columns in errors are 1-based.
pub fn parse_delimited(text: &str) -> Result<Table> {
    let mut header = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    let mut first = true;
    for (ln, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cells = split_cells(trimmed);
        if first {
            first = false;
            if cells.iter().any(|c| c.parse::<f64>().is_err()) {
                width = Some(cells.len());
                header = Some(cells.iter().map(|c| c.trim_matches('"').to_string()).collect());
                continue;
            }
        }
        let w = *width.get_or_insert(cells.len());
        if cells.len() != w {
            return Err(Error::Parse {
                row: ln + 1,
                column: cells.len().min(w) + 1,
                message: format!("expected {w} cells, found {}", cells.len()),
            });
        }
        let row = cells
            .iter()
            .enumerate()
            .map(|(c, s)| match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    row: ln + 1,
                    column: c + 1,
                    message: format!("not a finite number: '{s}'"),
                }),
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::invalid("no data rows"));
    }
    Ok(Table { header, rows })
}

/// Builds a normalised dataset from a table; `target_column` defaults to the
/// last column.
pub fn dataset_from_table(table: &Table, target_column: Option<usize>, split: Split, seed: u64) -> Result<Dataset> {
    let width = table.rows[0].len();
    if width < 2 {
        return Err(Error::invalid("need at least one input column and a target column"));
    }
    let target = target_column.unwrap_or(width - 1);
    if target >= width {
        return Err(Error::invalid(format!("target column {target} out of range for {width} columns")));
    }
    let n = table.rows.len();
    let (order, n_train): (Vec<usize>, usize) = match split {
        Split::Fraction(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::invalid(format!("train fraction must lie in (0, 1), got {f}")));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            (idx, (f * n as f64 + 1e-9).floor() as usize)
        }
        Split::Head(k) => ((0..n).collect(), k),
    };
    if n_train == 0 || n_train >= n {
        return Err(Error::invalid(format!("split leaves an empty side ({n_train} of {n} rows for training)")));
    }
    let inputs: Vec<usize> = (0..width).filter(|&c| c != target).collect();
    let build = |rows: &[usize]| {
        let x = DMatrix::from_fn(rows.len(), inputs.len(), |r, d| table.rows[rows[r]][inputs[d]]);
        let y = DVector::from_fn(rows.len(), |r, _| table.rows[rows[r]][target]);
        (x, y)
    };
    let (xtr, ytr) = build(&order[..n_train]);
    let (xte, yte) = build(&order[n_train..]);
    Dataset::from_raw(xtr, ytr, xte, yte)
}

pub fn load_delimited(path: &Path, target_column: Option<usize>, split: Split, seed: u64) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_from_table(&parse_delimited(&text)?, target_column, split, seed)
}
