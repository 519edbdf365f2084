use nalgebra::{DMatrix, SymmetricEigen};

use super::FeatureMatrix;
use crate::error::{dim_err, invalid, Result};

/// Principal-component projection of a feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub dims: usize,
    pub mean: Vec<f64>,
    /// `dims × d` row-major, one unit eigenvector per row.
    pub components: Vec<f64>,
    /// Covariance eigenvalues, descending.
    pub variances: Vec<f64>,
    /// `N × dims` row-major projected points.
    pub projected: Vec<f64>,
}

impl Pca {
    pub fn component(&self, i: usize) -> &[f64] {
        let d = self.mean.len();
        &self.components[i * d..(i + 1) * d]
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dims)
            .map(|c| {
                self.component(c)
                    .iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(w, (v, m))| w * (v - m))
                    .sum()
            })
            .collect()
    }
}

/// Centres by the mean and projects onto the leading `dims` covariance
/// eigenvectors. Each eigenvector is flipped so its largest-magnitude entry
/// is positive.
pub fn project_pca(feats: &FeatureMatrix, dims: usize) -> Result<Pca> {
    let (n, d) = (feats.rows(), feats.dim());
    if dims == 0 || dims > d {
        return Err(dim_err!("cannot project {}-dimensional features to {} dimensions", d, dims));
    }
    if n == 0 {
        return Err(invalid!("cannot fit PCA on zero rows"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(feats.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| feats.row(i)[j] - mean[j]);

    // Eigenvectors of whichever of XᵀX and XXᵀ is smaller.
    let mut vectors: Vec<(f64, Vec<f64>)> = if d <= n {
        let eig = SymmetricEigen::new(x.transpose() * &x);
        (0..d)
            .map(|c| (eig.eigenvalues[c], eig.eigenvectors.column(c).iter().copied().collect()))
            .collect()
    } else {
        let eig = SymmetricEigen::new(&x * x.transpose());
        (0..n)
            .map(|c| {
                let u = eig.eigenvectors.column(c);
                let v = x.transpose() * u;
                let norm = v.norm();
                let v: Vec<f64> = if norm > 0.0 { v.iter().map(|e| e / norm).collect() } else { vec![0.0; d] };
                (eig.eigenvalues[c], v)
            })
            .collect()
    };
    vectors.sort_by(|a, b| b.0.total_cmp(&a.0));
    let denom = (n.max(2) - 1) as f64;
    let mut components = Vec::with_capacity(dims * d);
    let mut variances = Vec::with_capacity(dims);
    for c in 0..dims {
        let (lambda, mut v) = vectors.get(c).cloned().unwrap_or((0.0, vec![0.0; d]));
        if v.iter().all(|&e| e == 0.0) {
            // rank deficit
            v = basis_completion(&components, d, c);
        }
        let mut arg = 0;
        for (i, e) in v.iter().enumerate() {
            if e.abs() > v[arg].abs() {
                arg = i;
            }
        }
        if v[arg] < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        components.extend_from_slice(&v);
        variances.push(lambda.max(0.0) / denom);
    }
    let mut pca = Pca {
        dims,
        mean,
        components,
        variances,
        projected: Vec::with_capacity(n * dims),
    };
    let mut projected = Vec::with_capacity(n * dims);
    for i in 0..n {
        projected.extend(pca.transform(feats.row(i)));
    }
    pca.projected = projected;
    Ok(pca)
}

fn basis_completion(existing: &[f64], d: usize, count: usize) -> Vec<f64> {
    for j in 0..d {
        let mut v = vec![0.0; d];
        v[j] = 1.0;
        for c in 0..count {
            let w = &existing[c * d..(c + 1) * d];
            let dot: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(w).for_each(|(e, wi)| *e -= dot * wi);
        }
        let norm = v.iter().map(|e| e * e).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.iter().map(|e| e / norm).collect();
        }
    }
    vec![0.0; d]
}
