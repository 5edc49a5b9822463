//! Splitting the training set into expert partitions.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const MAX_LLOYD_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionStrategy {
    Kmeans,
    Random,
}

impl std::str::FromStr for PartitionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kmeans" | "k-means" => Ok(Self::Kmeans),
            "random" => Ok(Self::Random),
            other => Err(Error::invalid(format!("unknown partition strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partitioning {
    pub assignments: Vec<usize>,
    pub m: usize,
    pub strategy: PartitionStrategy,
    pub seed: u64,
}

impl Partitioning {
    /// Builds a partitioning from explicit assignments, checking that every
    /// expert owns at least one row.
    pub fn from_assignments(assignments: Vec<usize>, m: usize, strategy: PartitionStrategy, seed: u64) -> Result<Self> {
        let p = Self {
            assignments,
            m,
            strategy,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("partitioning needs at least one expert"));
        }
        let mut counts = vec![0usize; self.m];
        for &a in &self.assignments {
            if a >= self.m {
                return Err(Error::invalid(format!("assignment {a} out of range for {} experts", self.m)));
            }
            counts[a] += 1;
        }
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!("expert {i} owns no rows")));
        }
        Ok(())
    }

    /// Row indices owned by each expert, in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.m];
        for (row, &a) in self.assignments.iter().enumerate() {
            out[a].push(row);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.m];
        for &a in &self.assignments {
            counts[a] += 1;
        }
        counts
    }
}

/// Seeded shuffle split into `m` parts whose sizes differ by at most one.
pub fn partition_random(n: usize, m: usize, seed: u64) -> Result<Partitioning> {
    if m == 0 || m > n {
        return Err(Error::invalid(format!("cannot split {n} rows into {m} partitions")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; n];
    for (pos, row) in order.into_iter().enumerate() {
        assignments[row] = pos % m;
    }
    Partitioning::from_assignments(assignments, m, PartitionStrategy::Random, seed)
}

#[derive(Debug, Clone)]
pub struct KmeansFit {
    pub partitioning: Partitioning,
    pub centroids: DMatrix<f64>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub objective_trace: Vec<f64>,
}

fn sq_dist_to(x: &DMatrix<f64>, i: usize, c: &DMatrix<f64>, k: usize) -> f64 {
    (0..x.ncols()).map(|d| (x[(i, d)] - c[(k, d)]).powi(2)).sum()
}

fn plus_plus_seeds(x: &DMatrix<f64>, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = x.nrows();
    let mut chosen = Vec::with_capacity(m);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist_rows(x, i, chosen[0])).collect();
    while chosen.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // guard against rounding landing on a zero-weight point
            if d2[pick] == 0.0 {
                d2.iter().position(|&w| w > 0.0).unwrap_or(pick)
            } else {
                pick
            }
        } else {
            // all remaining points coincide with a centre; take any unused row
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist_rows(x, i, next));
        }
    }
    DMatrix::from_fn(m, x.ncols(), |k, d| x[(chosen[k], d)])
}

fn sq_dist_rows(x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    (0..x.ncols()).map(|d| (x[(i, d)] - x[(j, d)]).powi(2)).sum()
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(x: &DMatrix<f64>, m: usize, seed: u64) -> Result<KmeansFit> {
    let n = x.nrows();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("cannot cluster {n} rows into {m} partitions")));
    }
    let dims = x.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(x, m, &mut rng);
    let mut assign = vec![usize::MAX; n];
    let mut trace = Vec::new();

    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for i in 0..n {
            let mut best = assign[i];
            let mut best_d = if best < m { sq_dist_to(x, i, &centroids, best) } else { f64::INFINITY };
            for k in 0..m {
                let d = sq_dist_to(x, i, &centroids, k);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if best != assign[i] {
                assign[i] = best;
                changed = true;
            }
        }

        let mut counts = vec![0usize; m];
        for &a in &assign {
            counts[a] += 1;
        }
        // Repair empty clusters by taking the point farthest from its centroid
        // out of a cluster that can spare it.
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let donor = (0..n)
                .filter(|&i| counts[assign[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist_to(x, a, &centroids, assign[a]);
                    let db = sq_dist_to(x, b, &centroids, assign[b]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("m <= n guarantees a donor");
            counts[assign[donor]] -= 1;
            assign[donor] = empty;
            counts[empty] = 1;
            for d in 0..dims {
                centroids[(empty, d)] = x[(donor, d)];
            }
            changed = true;
        }

        let mut sums = DMatrix::<f64>::zeros(m, dims);
        for i in 0..n {
            for d in 0..dims {
                sums[(assign[i], d)] += x[(i, d)];
            }
        }
        for k in 0..m {
            for d in 0..dims {
                centroids[(k, d)] = sums[(k, d)] / counts[k] as f64;
            }
        }
        trace.push((0..n).map(|i| sq_dist_to(x, i, &centroids, assign[i])).sum());
        if !changed {
            break;
        }
    }

    Ok(KmeansFit {
        partitioning: Partitioning::from_assignments(assign, m, PartitionStrategy::Kmeans, seed)?,
        centroids,
        objective_trace: trace,
    })
}

pub fn partition_kmeans(x: &DMatrix<f64>, m: usize, seed: u64) -> Result<Partitioning> {
    Ok(kmeans(x, m, seed)?.partitioning)
}
