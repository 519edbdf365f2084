use std::cmp::Ordering;

use rayon::prelude::*;

use super::FeatureMatrix;
use crate::error::{dim_err, invalid, Result};

/// Order of the vector norm used for embedding distances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
    Linf,
}

impl Norm {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Norm::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Norm::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Norm::Linf => a.iter().zip(b).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs())),
        }
    }

    pub fn parse(s: &str) -> Result<Norm> {
        match s {
            "1" => Ok(Norm::L1),
            "2" => Ok(Norm::L2),
            "inf" | "Inf" | "infinity" => Ok(Norm::Linf),
            _ => Err(invalid!("norm order must be 1, 2 or inf, got '{}'", s)),
        }
    }
}

/// Mean distance from `query` to its `k` nearest rows of `train`.
///
/// Neighbours are ranked by distance, ties broken by training index, and
/// the k distances are summed in ascending order.
pub fn knn_distance(query: &[f64], train: &FeatureMatrix, k: usize, norm: Norm) -> Result<f64> {
    if query.len() != train.dim() {
        return Err(dim_err!("query has dimension {}, training features {}", query.len(), train.dim()));
    }
    if k == 0 || k > train.rows() {
        return Err(invalid!("k = {} must lie in 1..={}", k, train.rows()));
    }
    let mut dist: Vec<(f64, usize)> = (0..train.rows())
        .map(|i| (norm.distance(query, train.row(i)), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, cmp);
        dist.truncate(k);
    }
    dist.sort_unstable_by(cmp);
    Ok(dist.iter().map(|d| d.0).sum::<f64>() / k as f64)
}

/// [`knn_distance`] for every row of `test`, in row order.
pub fn knn_distances(test: &FeatureMatrix, train: &FeatureMatrix, k: usize, norm: Norm) -> Result<Vec<f64>> {
    (0..test.rows())
        .into_par_iter()
        .map(|i| knn_distance(test.row(i), train, k, norm))
        .collect()
}

/// Average k-NN distance after standardising every feature with the
/// training mean and variance, divided by `√d` of the retained features.
///
/// Features with zero training variance are dropped.
pub fn standardized_mean_distance(train: &FeatureMatrix, test: &FeatureMatrix, k: usize, norm: Norm) -> Result<f64> {
    if train.dim() != test.dim() {
        return Err(dim_err!("train dim {} vs test dim {}", train.dim(), test.dim()));
    }
    if test.rows() == 0 {
        return Err(invalid!("test features are empty"));
    }
    let (n, d) = (train.rows() as f64, train.dim());
    let mut mean = vec![0.0; d];
    for i in 0..train.rows() {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for i in 0..train.rows() {
        for ((s, v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    let keep: Vec<usize> = (0..d).filter(|&j| var[j] > 0.0).collect();
    if keep.is_empty() {
        return Err(invalid!("every feature has zero variance on the training set"));
    }
    if keep.len() < d {
        log::warn!("dropping {} zero-variance feature(s) of {}", d - keep.len(), d);
    }
    let standardize = |m: &FeatureMatrix| -> Result<FeatureMatrix> {
        let mut data = Vec::with_capacity(m.rows() * keep.len());
        for i in 0..m.rows() {
            let row = m.row(i);
            data.extend(keep.iter().map(|&j| (row[j] - mean[j]) / var[j].sqrt()));
        }
        FeatureMatrix::new(m.rows(), keep.len(), data, m.source, m.extractor)
    };
    let (tr, te) = (standardize(train)?, standardize(test)?);
    let dists = knn_distances(&te, &tr, k, norm)?;
    let avg = dists.iter().sum::<f64>() / dists.len() as f64;
    Ok(avg / (keep.len() as f64).sqrt())
}
