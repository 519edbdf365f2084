use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::FeatureMatrix;
use crate::error::{invalid, Result};

pub const MAX_POINTS: usize = 20_000;

#[derive(Clone, Debug, PartialEq)]
pub struct TsneOptions {
    pub dims: usize,
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Exaggeration is applied, and momentum held at its initial value, for this many iterations.
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneOptions {
    fn default() -> Self {
        TsneOptions {
            dims: 2,
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TsneOutput {
    /// `N × dims` row-major.
    pub embedding: Vec<f64>,
    pub dims: usize,
    /// KL(P‖Q) after every iteration, against the unexaggerated P.
    pub objective: Vec<f64>,
    /// Entropy in bits of every calibrated conditional distribution.
    pub entropies: Vec<f64>,
}

/// Exact O(N²) t-SNE.
pub fn project_tsne(feats: &FeatureMatrix, opts: &TsneOptions) -> Result<TsneOutput> {
    let n = feats.rows();
    if n > MAX_POINTS {
        return Err(invalid!("exact t-SNE supports at most {} points, got {}", MAX_POINTS, n));
    }
    if !(opts.perplexity > 0.0) || opts.perplexity >= (n as f64 - 1.0) / 3.0 {
        return Err(invalid!(
            "perplexity {} infeasible for {} points (must be below {})",
            opts.perplexity,
            n,
            (n as f64 - 1.0) / 3.0
        ));
    }
    if opts.dims == 0 {
        return Err(invalid!("embedding dimension must be positive"));
    }
    let (cond, entropies) = calibrate(feats, opts.perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
        p[i * n + i] = 0.0;
    }

    let dims = opts.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = Normal::new(0.0, 1e-2).expect("valid normal");
    let mut y: Vec<f64> = (0..n * dims).map(|_| normal.sample(&mut rng)).collect();
    let mut update = vec![0.0; n * dims];
    let mut gains = vec![1.0f64; n * dims];
    let mut grad = vec![0.0; n * dims];
    let mut num = vec![0.0; n * n];
    let mut objective = Vec::with_capacity(opts.iterations);

    for it in 0..opts.iterations {
        let exaggerate = if it < opts.exaggeration_iters { opts.early_exaggeration } else { 1.0 };
        let momentum = if it < opts.exaggeration_iters { opts.initial_momentum } else { opts.final_momentum };

        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = if i == j {
                    0.0
                } else {
                    let d2: f64 = (0..dims).map(|c| (y[i * dims + c] - y[j * dims + c]).powi(2)).sum();
                    1.0 / (1.0 + d2)
                };
                num[i * n + j] = v;
                total += v;
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[i * n + j] / total).max(1e-12);
                let m = 4.0 * (exaggerate * p[i * n + j] - q) * num[i * n + j];
                for c in 0..dims {
                    grad[i * dims + c] += m * (y[i * dims + c] - y[j * dims + c]);
                }
            }
        }
        for k in 0..n * dims {
            gains[k] = if (grad[k] > 0.0) != (update[k] > 0.0) { gains[k] + 0.2 } else { gains[k] * 0.8 };
            gains[k] = gains[k].max(0.01);
            update[k] = momentum * update[k] - opts.learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
        for c in 0..dims {
            let mean = (0..n).map(|i| y[i * dims + c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[i * dims + c] -= mean);
        }
        objective.push(kl_objective(&p, &y, n, dims));
    }
    Ok(TsneOutput {
        embedding: y,
        dims,
        objective,
        entropies,
    })
}

fn kl_objective(p: &[f64], y: &[f64], n: usize, dims: usize) -> f64 {
    let mut num = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d2: f64 = (0..dims).map(|c| (y[i * dims + c] - y[j * dims + c]).powi(2)).sum();
                num[i * n + j] = 1.0 / (1.0 + d2);
                total += num[i * n + j];
            }
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let pij = p[i * n + j];
                kl += pij * (pij / (num[i * n + j] / total).max(1e-12)).ln();
            }
        }
    }
    kl
}

/// Row-conditional affinities `p_{j|i}` with per-point precision found by
/// bisection so each row's entropy is `log₂(perplexity)` bits. Returns the
/// `N × N` matrix and the achieved entropies.
fn calibrate(feats: &FeatureMatrix, perplexity: f64) -> (Vec<f64>, Vec<f64>) {
    let n = feats.rows();
    let target = perplexity.ln();
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = feats.row(i);
            let d2: Vec<f64> = (0..n)
                .map(|j| xi.iter().zip(feats.row(j)).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let dmin = (0..n).filter(|&j| j != i).map(|j| d2[j]).fold(f64::INFINITY, f64::min);
            let mut beta = 1.0;
            let (mut lo, mut hi) = (0.0, f64::INFINITY);
            let mut row = vec![0.0; n];
            let mut h = 0.0;
            for _ in 0..200 {
                let mut sum = 0.0;
                let mut weighted = 0.0;
                for j in 0..n {
                    row[j] = if j == i { 0.0 } else { (-beta * (d2[j] - dmin)).exp() };
                    sum += row[j];
                    weighted += row[j] * (d2[j] - dmin);
                }
                h = sum.ln() + beta * weighted / sum;
                row.iter_mut().for_each(|v| *v /= sum);
                let diff = h - target;
                if diff.abs() < 1e-10 {
                    break;
                }
                if diff > 0.0 {
                    lo = beta;
                    beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
            }
            (row, h / std::f64::consts::LN_2)
        })
        .collect();
    let mut cond = Vec::with_capacity(n * n);
    let mut entropies = Vec::with_capacity(n);
    for (row, h) in rows {
        cond.extend(row);
        entropies.push(h);
    }
    (cond, entropies)
}
