//! Embedding-space geometry: k-NN distances, projections, 2-D KDE and
//! grid-integrated K-L divergence between train and test densities.

mod kde;
mod knn;
mod pca;
mod tsne;

pub use kde::{kl_divergence, DensityModel, GridOptions, PlaneBox};
pub use knn::{knn_distance, knn_distances, standardized_mean_distance, Norm};
pub use pca::{project_pca, Pca};
pub use tsne::{project_tsne, TsneOptions, TsneOutput};

use std::io::Write;
use std::path::Path;

use crate::data::Split;
use crate::error::{dim_err, invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extractor {
    Natural,
    Adversarial,
    Raw,
}

impl Extractor {
    pub fn as_str(&self) -> &'static str {
        match self {
            Extractor::Natural => "natural",
            Extractor::Adversarial => "adversarial",
            Extractor::Raw => "raw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(Extractor::Natural),
            "adversarial" => Ok(Extractor::Adversarial),
            "raw" => Ok(Extractor::Raw),
            _ => Err(invalid!("unknown extractor tag '{}'", s)),
        }
    }
}

fn split_str(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// Row-major `[N × d]` feature vectors tagged with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    pub source: Split,
    pub extractor: Extractor,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>, source: Split, extractor: Extractor) -> Result<Self> {
        if rows * dim != data.len() {
            return Err(dim_err!("{}×{} features but {} values", rows, dim, data.len()));
        }
        if dim == 0 {
            return Err(dim_err!("feature dimension must be positive"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("feature matrix contains non-finite values"));
        }
        Ok(FeatureMatrix {
            rows,
            dim,
            data,
            source,
            extractor,
        })
    }

    /// Wraps a `[N × d]` tensor.
    pub fn from_tensor(t: &Tensor, source: Split, extractor: Extractor) -> Result<Self> {
        FeatureMatrix::new(t.batch_len(), t.sample_len(), t.data().to_vec(), source, extractor)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            rows: indices.len(),
            dim: self.dim,
            data,
            source: self.source,
            extractor: self.extractor,
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.dim != other.dim {
            return Err(dim_err!("cannot concatenate dims {} and {}", self.dim, other.dim));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(FeatureMatrix {
            rows: self.rows + other.rows,
            dim: self.dim,
            data,
            source: self.source,
            extractor: self.extractor,
        })
    }

    /// CSV with a one-line header `N,d_t,source,extractor`, then one row per vector.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},{},{},{}\n",
            self.rows,
            self.dim,
            split_str(self.source),
            self.extractor.as_str()
        );
        for i in 0..self.rows {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            s += &row.join(",");
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<FeatureMatrix> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty feature CSV".into()))?;
        let h: Vec<&str> = header.split(',').map(str::trim).collect();
        let [n, d, source, extractor] = h[..] else {
            return Err(Error::Parse(format!("bad feature CSV header '{}'", header)));
        };
        let rows: usize = n.parse().map_err(|_| Error::Parse(format!("bad row count '{}'", n)))?;
        let dim: usize = d.parse().map_err(|_| Error::Parse(format!("bad dimension '{}'", d)))?;
        let source = match source {
            "train" => Split::Train,
            "test" => Split::Test,
            s => return Err(Error::Parse(format!("bad source tag '{}'", s))),
        };
        let mut data = Vec::with_capacity(rows * dim);
        for line in lines.filter(|l| !l.is_empty()) {
            for tok in line.split(',') {
                data.push(
                    tok.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad value '{}'", tok)))?,
                );
            }
        }
        FeatureMatrix::new(rows, dim, data, source, Extractor::parse(extractor)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<FeatureMatrix> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FeatureMatrix::from_csv(&text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Pca,
    Tsne(TsneOptions),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionOptions {
    pub projection: Projection,
    pub grid: GridOptions,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            projection: Projection::Pca,
            grid: GridOptions::default(),
        }
    }
}

/// Projects `train` and `test` jointly to two dimensions and returns the two halves.
pub fn project_joint(train: &FeatureMatrix, test: &FeatureMatrix, projection: &Projection) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>)> {
    let joint = train.concat(test)?;
    let flat = match projection {
        Projection::Pca => project_pca(&joint, 2)?.projected,
        Projection::Tsne(opts) => project_tsne(&joint, opts)?.embedding,
    };
    let pts: Vec<[f64; 2]> = flat.chunks(2).map(|c| [c[0], c[1]]).collect();
    let (a, b) = pts.split_at(train.rows());
    Ok((a.to_vec(), b.to_vec()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassKl {
    pub class: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// `Err` carries the reason the class could not be evaluated.
    pub kl: std::result::Result<f64, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerClassKl {
    pub classes: Vec<ClassKl>,
    /// Mean over the classes that could be evaluated.
    pub mean: Option<f64>,
}

impl PerClassKl {
    pub fn from_classes(classes: Vec<ClassKl>) -> PerClassKl {
        let ok: Vec<f64> = classes.iter().filter_map(|c| c.kl.as_ref().ok().copied()).collect();
        let mean = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
        PerClassKl { classes, mean }
    }
}

/// K-L divergence between the train and test KDE densities of every class,
/// each class projected jointly on its own.
pub fn per_class_kl(
    train: &FeatureMatrix,
    train_labels: &[usize],
    test: &FeatureMatrix,
    test_labels: &[usize],
    opts: &ProjectionOptions,
) -> Result<PerClassKl> {
    if train.rows() != train_labels.len() || test.rows() != test_labels.len() {
        return Err(invalid!("feature rows and label counts differ"));
    }
    let num_classes = train_labels.iter().chain(test_labels).max().map_or(0, |m| m + 1);
    let mut classes = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let tr: Vec<usize> = (0..train.rows()).filter(|&i| train_labels[i] == class).collect();
        let te: Vec<usize> = (0..test.rows()).filter(|&i| test_labels[i] == class).collect();
        let kl = if tr.len() < 2 || te.len() < 2 {
            Err(format!(
                "class {} needs at least 2 points per split (train {}, test {})",
                class,
                tr.len(),
                te.len()
            ))
        } else {
            class_kl(&train.select(&tr), &test.select(&te), opts).map_err(|e| e.to_string())
        };
        classes.push(ClassKl {
            class,
            train_count: tr.len(),
            test_count: te.len(),
            kl,
        });
    }
    Ok(PerClassKl::from_classes(classes))
}

fn class_kl(train: &FeatureMatrix, test: &FeatureMatrix, opts: &ProjectionOptions) -> Result<f64> {
    let (a, b) = project_joint(train, test, &opts.projection)?;
    let p = DensityModel::fit(&a)?;
    let q = DensityModel::fit(&b)?;
    kl_divergence(&p, &q, &opts.grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let f = FeatureMatrix::new(2, 3, vec![0.1, -2.5, 1e-17, 3.0, 0.0, 7.25], Split::Test, Extractor::Adversarial).unwrap();
        let back = FeatureMatrix::from_csv(&f.to_csv()).unwrap();
        assert_eq!(back, f);
        assert!(f.to_csv().starts_with("2,3,test,adversarial\n"));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(FeatureMatrix::new(1, 1, vec![f64::NAN], Split::Train, Extractor::Raw).is_err());
    }

    #[test]
    fn identical_splits_have_zero_kl() {
        let data: Vec<f64> = (0..120).map(|i| ((i * 37) % 23) as f64 * 0.1 + (i % 5) as f64).collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let tr = FeatureMatrix::new(40, 3, data.clone(), Split::Train, Extractor::Raw).unwrap();
        let te = FeatureMatrix::new(40, 3, data, Split::Test, Extractor::Raw).unwrap();
        let opts = ProjectionOptions {
            grid: GridOptions { resolution: 64, ..GridOptions::default() },
            ..ProjectionOptions::default()
        };
        let r = per_class_kl(&tr, &labels, &te, &labels, &opts).unwrap();
        assert!(r.mean.unwrap().abs() < 5e-3);
    }

    #[test]
    fn missing_class_is_reported_not_fatal() {
        let tr_data: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 + i as f64 * 0.1).collect();
        let te_data: Vec<f64> = (0..6).map(|i| ((i * 3) % 4) as f64 - i as f64 * 0.2).collect();
        let tr = FeatureMatrix::new(6, 2, tr_data, Split::Train, Extractor::Raw).unwrap();
        let te = FeatureMatrix::new(3, 2, te_data, Split::Test, Extractor::Raw).unwrap();
        let opts = ProjectionOptions {
            grid: GridOptions { resolution: 32, ..GridOptions::default() },
            ..ProjectionOptions::default()
        };
        let r = per_class_kl(&tr, &[0, 0, 0, 1, 1, 1], &te, &[0, 0, 0], &opts).unwrap();
        assert!(r.classes[0].kl.is_ok());
        assert!(r.classes[1].kl.is_err());
        assert_eq!(r.mean, r.classes[0].kl.clone().ok());
    }
}
