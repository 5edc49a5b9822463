// Limited-memory BFGS with Armijo backtracking, used for hyperparameter fits.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub(crate) struct LbfgsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Stop when an accepted step lowers `f` by less than this fraction of
    /// `max(|f|, 1)`.
    pub f_tol: f64,
    pub memory: usize,
    /// Iterates with any |x_i| above this are rejected by the line search.
    pub bound: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-6,
            f_tol: 1e-10,
            memory: 10,
            bound: 20.0,
        }
    }
}

#[derive(Debug, Clone)]
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimises `f`. The objective returns `None` where it cannot be evaluated;
/// such points are treated as infinitely bad.
pub(crate) fn minimize<F>(mut f: F, x0: Vec<f64>, opts: LbfgsOptions) -> Result<Minimum, String>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let in_bounds = |x: &[f64]| x.iter().all(|v| v.is_finite() && v.abs() <= opts.bound);
    let valid = |r: &Option<(f64, Vec<f64>)>| match r {
        Some((v, g)) => v.is_finite() && g.iter().all(|x| x.is_finite()),
        None => false,
    };

    let first = f(&x0);
    if !valid(&first) {
        return Err("objective not finite at the starting point".into());
    }
    let (mut fx, mut g) = first.unwrap();
    let mut x = x0;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        if norm(&g) < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;

        // two-loop recursion
        let mut q: Vec<f64> = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = match history.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / norm(&g).max(1.0),
        };
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            let scale = 1.0 / norm(&g).max(1.0);
            dir = g.iter().map(|v| -v * scale).collect();
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            if in_bounds(&trial) {
                let r = f(&trial);
                if valid(&r) {
                    let (ft, gt) = r.unwrap();
                    if ft <= fx + 1e-4 * step * slope {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
            }
            step *= 0.5;
        }

        let Some((xn, fnew, gn)) = accepted else {
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            history.push_back((s, y, 1.0 / sy));
            if history.len() > opts.memory {
                history.pop_front();
            }
        }
        let decrease = fx - fnew;
        x = xn;
        fx = fnew;
        g = gn;
        if decrease.abs() <= opts.f_tol * fx.abs().max(1.0) {
            converged = norm(&g) < opts.grad_tol;
            break;
        }
    }
    if norm(&g) < opts.grad_tol {
        converged = true;
    }

    Ok(Minimum {
        x,
        f: fx,
        iterations,
        converged,
    })
}
