//! End-to-end experiment pipelines and report emission.

mod report;
pub mod svg;

pub use report::{emit_report, spearman, BinnedReport, GridReport, GridRow, Outcome, Report, ShiftHistograms};

use rayon::prelude::*;

use crate::attack::{attack_success, attack_suite, AttackMethod, SuiteReport};
use crate::blindspot::{param_grid, scale_shift, strict_threshold, TransformParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{knn_distances, Extractor, FeatureMatrix, Norm};
use crate::nn::Model;
use crate::tensor::Tensor;

const FEATURE_CHUNK: usize = 200;

/// Where embedding features come from.
#[derive(Clone, Copy, Debug)]
pub enum FeatureSource<'a> {
    /// Activations of `model` at a named tap.
    Tap {
        model: &'a Model,
        tap: &'a str,
        extractor: Extractor,
    },
    /// Flattened pixels.
    Raw,
}

impl FeatureSource<'_> {
    pub fn extractor(&self) -> Extractor {
        match self {
            FeatureSource::Tap { extractor, .. } => *extractor,
            FeatureSource::Raw => Extractor::Raw,
        }
    }

    pub fn features(&self, images: &Tensor, split: crate::data::Split) -> Result<FeatureMatrix> {
        let t = match self {
            FeatureSource::Raw => images.reshape(&[images.batch_len(), images.sample_len()])?,
            FeatureSource::Tap { model, tap, .. } => {
                let n = images.batch_len();
                let starts: Vec<usize> = (0..n).step_by(FEATURE_CHUNK).collect();
                let parts = starts
                    .par_iter()
                    .map(|&s| {
                        let idx: Vec<usize> = (s..(s + FEATURE_CHUNK).min(n)).collect();
                        model.extract_features(&images.select(&idx)?, tap)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let dim = parts[0].sample_len();
                let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
                Tensor::new(vec![n, dim], data)?
            }
        };
        FeatureMatrix::from_tensor(&t, split, self.extractor())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceOptions {
    pub k: usize,
    pub norm: Norm,
    pub bins: usize,
    pub min_bin_count: usize,
    pub epsilon: f64,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        DistanceOptions {
            k: 5,
            norm: Norm::L2,
            bins: 20,
            min_bin_count: 10,
            epsilon: 0.3,
        }
    }
}

/// k-NN distance of every test image to the training set in feature space.
pub fn test_distances(source: &FeatureSource, train: &FeatureMatrix, test: &Dataset, k: usize, norm: Norm) -> Result<Vec<f64>> {
    let feats = source.features(test.images(), test.split)?;
    knn_distances(&feats, train, k, norm)
}

/// Per-example outcome in dataset order: `None` for misclassified points.
pub fn outcomes(suite: &SuiteReport, threshold: f64) -> Vec<Outcome> {
    let mut out = vec![None; suite.evaluated];
    for r in &suite.results {
        out[r.index] = Some(attack_success(r, threshold));
    }
    out
}

/// Bins already computed distances against an already run attack suite.
pub fn bin_suite(distances: &[f64], suite: &SuiteReport, opts: &DistanceOptions) -> Result<BinnedReport> {
    if suite.results.is_empty() {
        return Err(Error::NoAttackable("every test point is misclassified".into()));
    }
    BinnedReport::from_points(distances, &outcomes(suite, opts.epsilon), opts.bins, opts.min_bin_count, opts.epsilon)
}

/// Attack success of `model` on `test`, binned by each point's k-NN distance
/// to `train` in the feature space of `source`.
pub fn distance_binned_success(
    model: &Model,
    source: &FeatureSource,
    train: &Dataset,
    test: &Dataset,
    opts: &DistanceOptions,
    method: &AttackMethod,
) -> Result<BinnedReport> {
    if test.is_empty() {
        return Err(crate::error::invalid!("test subset is empty"));
    }
    let train_feats = source.features(train.images(), train.split)?;
    let distances = test_distances(source, &train_feats, test, opts.k, opts.norm)?;
    let suite = attack_suite(model, test, &[opts.epsilon], method)?;
    bin_suite(&distances, &suite, opts)
}

/// Accuracy and attack success for each `(α, β)`, counting success both
/// below `ε` and below `α·ε`. A failing row records its error and the grid continues.
pub fn blindspot_grid(model: &Model, test: &Dataset, params: &[TransformParams], epsilon: f64, method: &AttackMethod) -> GridReport {
    let rows = params
        .iter()
        .map(|p| {
            let strict = strict_threshold(p, epsilon);
            let run = || -> Result<SuiteReport> {
                let shifted = test.with_images(scale_shift(test.images(), p)?)?;
                attack_suite(model, &shifted, &[epsilon, strict], method)
            };
            match run() {
                Ok(suite) => GridRow {
                    params: *p,
                    accuracy: Some(suite.attacked() as f64 / suite.evaluated.max(1) as f64),
                    evaluated: suite.evaluated,
                    attacked: suite.attacked(),
                    success_eps: suite.success_rates[0],
                    success_strict: suite.success_rates[1],
                    error: None,
                },
                Err(e) => {
                    log::warn!("grid row ({}, {}) failed: {}", p.alpha(), p.beta(), e);
                    GridRow {
                        params: *p,
                        accuracy: None,
                        evaluated: test.len(),
                        attacked: 0,
                        success_eps: None,
                        success_strict: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    GridReport { epsilon, rows }
}

/// [`blindspot_grid`] over the parameter grid of a dataset tag.
pub fn blindspot_grid_for(model: &Model, test: &Dataset, dataset: &str, epsilon: f64, method: &AttackMethod) -> Result<GridReport> {
    Ok(blindspot_grid(model, test, &param_grid(dataset)?, epsilon, method))
}

/// Histograms of k-NN distances for the original and the transformed test set.
pub fn distance_shift_histograms(
    source: &FeatureSource,
    train: &FeatureMatrix,
    test: &Dataset,
    params: &TransformParams,
    k: usize,
    norm: Norm,
    bins: usize,
) -> Result<ShiftHistograms> {
    let original = test_distances(source, train, test, k, norm)?;
    let shifted = test.with_images(scale_shift(test.images(), params)?)?;
    let transformed = test_distances(source, train, &shifted, k, norm)?;
    let all = original.iter().chain(&transformed);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let hist = |d: &[f64]| {
        let mut h = vec![0; bins];
        for &v in d {
            h[report::bin_of(v, lo, hi, bins)] += 1;
        }
        h
    };
    if bins == 0 {
        return Err(crate::error::invalid!("need at least one bin"));
    }
    Ok(ShiftHistograms {
        edges: if original.is_empty() { Vec::new() } else { report::equal_edges(lo, hi, bins) },
        original: hist(&original),
        transformed: hist(&transformed),
    })
}
