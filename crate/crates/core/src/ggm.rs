//! Sparse precision estimation over expert predictions, expert importance and
//! selection.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::experts::ExpertEnsemble;
use crate::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlassoOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GlassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlassoFit {
    pub precision: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub sweeps: usize,
    pub converged: bool,
    /// Penalized objective at the start and after every sweep.
    pub objective_trace: Vec<f64>,
}

/// How the covariance of expert predictions is scaled before estimation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    /// Sample covariance of the centred predictions.
    #[default]
    Covariance,
    /// Covariance divided by per-expert standard deviations.
    Correlation,
}

impl std::str::FromStr for Scaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "covariance" | "cov" => Ok(Self::Covariance),
            "correlation" | "corr" => Ok(Self::Correlation),
            other => Err(Error::invalid(format!("unknown scaling '{other}'"))),
        }
    }
}

/// Covariance of expert predictions over a set of test inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionCov {
    pub s: DMatrix<f64>,
    /// Experts whose predictions are constant over the inputs. Their
    /// off-diagonal entries are zero; the diagonal is 1 under correlation
    /// scaling and a tiny positive floor otherwise.
    pub degenerate: Vec<usize>,
}

/// `means[i][t]` is expert `i`'s mean at test point `t`.
pub fn covariance_of_predictions(means: &[Vec<f64>], scaling: Scaling) -> Result<PredictionCov> {
    let m = means.len();
    if m == 0 {
        return Err(Error::EmptySubset);
    }
    let nt = means[0].len();
    if nt < 2 {
        return Err(Error::invalid("need at least two test points to estimate a covariance"));
    }
    if let Some(bad) = means.iter().find(|v| v.len() != nt) {
        return Err(Error::DimensionMismatch {
            expected: nt,
            found: bad.len(),
        });
    }
    let centered: Vec<Vec<f64>> = means
        .iter()
        .map(|v| {
            let mu = v.iter().sum::<f64>() / nt as f64;
            v.iter().map(|x| x - mu).collect()
        })
        .collect();
    let mut cov = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let c = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>() / nt as f64;
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    let degenerate: Vec<usize> = (0..m)
        .filter(|&i| {
            let scale = means[i].iter().fold(0.0f64, |a, x| a.max(x.abs()));
            let sd = cov[(i, i)].max(0.0).sqrt();
            sd == 0.0 || sd <= 1e-12 * scale
        })
        .collect();
    let flat = |i: usize| degenerate.binary_search(&i).is_ok();
    let floor = 1e-12 * (0..m).map(|i| cov[(i, i)]).fold(1.0, f64::max);
    let s = DMatrix::from_fn(m, m, |i, j| match (i == j, flat(i) || flat(j), scaling) {
        (true, true, Scaling::Covariance) => floor,
        (true, _, Scaling::Correlation) => 1.0,
        (true, false, Scaling::Covariance) => cov[(i, i)],
        (false, true, _) => 0.0,
        (false, false, Scaling::Covariance) => cov[(i, j)],
        (false, false, Scaling::Correlation) => (cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt()).clamp(-1.0, 1.0),
    });
    Ok(PredictionCov { s, degenerate })
}

pub fn prediction_covariance(ens: &ExpertEnsemble, xs: &DMatrix<f64>, scaling: Scaling) -> Result<PredictionCov> {
    let preds = ens.predict_all(xs)?;
    let means: Vec<Vec<f64>> = preds.into_iter().map(|p| p.means).collect();
    covariance_of_predictions(&means, scaling)
}

/// `log|omega| - tr(S omega) - lambda * sum_{i != j} |omega_ij|`.
pub fn glasso_objective(s: &DMatrix<f64>, omega: &DMatrix<f64>, lambda: f64) -> f64 {
    let log_det = match Cholesky::new(omega.clone()) {
        Some(c) => 2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        None => return f64::NEG_INFINITY,
    };
    let trace = s.component_mul(omega).sum();
    let mut l1 = 0.0;
    for i in 0..omega.nrows() {
        for j in 0..omega.ncols() {
            if i != j {
                l1 += omega[(i, j)].abs();
            }
        }
    }
    log_det - trace - lambda * l1
}

fn soft(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Minimises `0.5 t'Qt + c't + lambda |t|_1` by cyclic coordinate descent,
/// starting from `theta`.
fn lasso_cd(q: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, theta: &mut DVector<f64>) {
    let p = theta.len();
    for _ in 0..10_000 {
        let mut delta = 0.0f64;
        let mut size = 0.0f64;
        for k in 0..p {
            let mut r = c[k];
            for l in 0..p {
                if l != k {
                    r += q[(k, l)] * theta[l];
                }
            }
            let new = soft(-r, lambda) / q[(k, k)];
            delta = delta.max((new - theta[k]).abs());
            size = size.max(new.abs());
            theta[k] = new;
        }
        if delta <= 1e-12 * (1.0 + size) {
            break;
        }
    }
}

/// Graphical lasso with an off-diagonal penalty, solved on the precision
/// matrix one row/column at a time. Each column step maximises the objective
/// exactly over that column, so the objective never decreases.
pub fn graphical_lasso(s: &DMatrix<f64>, lambda: f64, opts: &GlassoOptions) -> Result<GlassoFit> {
    let m = s.nrows();
    if m == 0 || s.ncols() != m {
        return Err(Error::invalid("covariance must be a non-empty square matrix"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if (0..m).any(|i| !(s[(i, i)] > 0.0)) {
        return Err(Error::invalid("covariance diagonal must be positive"));
    }

    let mut omega = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 / s[(i, i)] } else { 0.0 });
    let mut w = DMatrix::from_fn(m, m, |i, j| if i == j { s[(i, i)] } else { 0.0 });
    let mut trace = vec![glasso_objective(s, &omega, lambda)];
    if m == 1 {
        return Ok(GlassoFit {
            precision: omega,
            covariance: w,
            sweeps: 0,
            converged: true,
            objective_trace: trace,
        });
    }

    let mut off = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                off += s[(i, j)].abs();
            }
        }
    }
    off /= (m * (m - 1)) as f64;
    let threshold = if off > 0.0 { opts.tol * off } else { opts.tol };

    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < opts.max_iter {
        sweeps += 1;
        let w_old = w.clone();
        for j in 0..m {
            let rest: Vec<usize> = (0..m).filter(|&k| k != j).collect();
            let p = rest.len();
            let wjj = w[(j, j)];
            // Inverse of the precision block without row/column j.
            let a = DMatrix::from_fn(p, p, |r, c| w[(rest[r], rest[c])] - w[(rest[r], j)] * w[(rest[c], j)] / wjj);
            let s22 = s[(j, j)];
            let q = &a * s22;
            let c = DVector::from_fn(p, |r, _| s[(rest[r], j)]);
            let mut theta = DVector::from_fn(p, |r, _| omega[(rest[r], j)]);
            lasso_cd(&q, &c, lambda, &mut theta);

            let at = &a * &theta;
            let t22 = 1.0 / s22 + theta.dot(&at);
            for (r, &k) in rest.iter().enumerate() {
                omega[(k, j)] = theta[r];
                omega[(j, k)] = theta[r];
            }
            omega[(j, j)] = t22;

            w[(j, j)] = s22;
            for (r, &k) in rest.iter().enumerate() {
                w[(k, j)] = -s22 * at[r];
                w[(j, k)] = -s22 * at[r];
                for (c2, &l) in rest.iter().enumerate() {
                    w[(k, l)] = a[(r, c2)] + s22 * at[r] * at[c2];
                }
            }
        }
        // Re-synchronise the working covariance to limit drift.
        if let Some(ch) = Cholesky::new(omega.clone()) {
            w = ch.inverse();
        }
        trace.push(glasso_objective(s, &omega, lambda));
        let change = (&w - &w_old).abs().sum() / (m * m) as f64;
        if change < threshold {
            converged = true;
            break;
        }
    }

    Ok(GlassoFit {
        precision: omega,
        covariance: w,
        sweeps,
        converged,
        objective_trace: trace,
    })
}

/// Importance is the absolute off-diagonal row sum; the order is descending
/// with ties broken by ascending index.
pub fn rank_importance(omega: &DMatrix<f64>) -> (Vec<f64>, Vec<usize>) {
    let m = omega.nrows();
    let importance: Vec<f64> = (0..m)
        .map(|i| (0..m).filter(|&j| j != i).map(|j| omega[(i, j)].abs()).sum())
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    (importance, order)
}

pub fn selection_size(m: usize, alpha: f64) -> Result<usize> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("selection rate must lie in (0, 1], got {alpha}")));
    }
    Ok(((alpha * m as f64 - 1e-9).ceil() as usize).clamp(1, m))
}

/// First `ceil(alpha * M)` entries of `order`, returned in ascending index order.
pub fn select_experts(order: &[usize], alpha: f64) -> Result<Vec<usize>> {
    let k = selection_size(order.len(), alpha)?;
    let mut sel = order[..k].to_vec();
    sel.sort_unstable();
    Ok(sel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGraph {
    pub s: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub lambda: f64,
    pub importance: Vec<f64>,
    pub order: Vec<usize>,
    pub alpha: f64,
    pub selected: Vec<usize>,
    pub degenerate: Vec<usize>,
    pub converged: bool,
    pub sweeps: usize,
}

impl ExpertGraph {
    pub fn from_covariance(cov: PredictionCov, lambda: f64, alpha: f64, opts: &GlassoOptions) -> Result<Self> {
        let fit = graphical_lasso(&cov.s, lambda, opts)?;
        let (importance, order) = rank_importance(&fit.precision);
        let selected = select_experts(&order, alpha)?;
        Ok(Self {
            s: cov.s,
            omega: fit.precision,
            lambda,
            importance,
            order,
            alpha,
            selected,
            degenerate: cov.degenerate,
            converged: fit.converged,
            sweeps: fit.sweeps,
        })
    }

    pub fn build(
        ens: &ExpertEnsemble,
        xs: &DMatrix<f64>,
        scaling: Scaling,
        lambda: f64,
        alpha: f64,
        opts: &GlassoOptions,
    ) -> Result<Self> {
        Self::from_covariance(prediction_covariance(ens, xs, scaling)?, lambda, alpha, opts)
    }

    pub fn m(&self) -> usize {
        self.omega.nrows()
    }

    /// Re-selects with a different rate without re-estimating the graph.
    pub fn select(&self, alpha: f64) -> Result<Vec<usize>> {
        select_experts(&self.order, alpha)
    }

    /// Non-zero off-diagonal entries of the precision, `source < target`.
    pub fn edges(&self) -> Vec<Edge> {
        let m = self.m();
        let mut out = Vec::new();
        for i in 0..m {
            for j in i + 1..m {
                let w = self.omega[(i, j)];
                if w != 0.0 {
                    out.push(Edge {
                        source: i,
                        target: j,
                        weight: w,
                    });
                }
            }
        }
        out
    }

    /// Writes the precision matrix as comma-separated rows to `path` and the
    /// edge list to `<stem>.edges.csv` next to it. Returns the edge-list path.
    pub fn write_csv(&self, path: &Path) -> Result<std::path::PathBuf> {
        let mut matrix = String::new();
        for i in 0..self.m() {
            let row: Vec<String> = (0..self.m()).map(|j| format!("{}", self.omega[(i, j)])).collect();
            matrix.push_str(&row.join(","));
            matrix.push('\n');
        }
        std::fs::write(path, matrix).map_err(|e| Error::io(path, e))?;

        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("graph");
        let edge_path = path.with_file_name(format!("{stem}.edges.csv"));
        let mut f = std::fs::File::create(&edge_path).map_err(|e| Error::io(&edge_path, e))?;
        let mut body = String::from("source,target,weight\n");
        for e in self.edges() {
            body.push_str(&format!("{},{},{}\n", e.source, e.target, e.weight));
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(&edge_path, e))?;
        Ok(edge_path)
    }
}
