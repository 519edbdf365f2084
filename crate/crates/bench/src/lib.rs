//! Deterministic inputs shared by the benchmarks.

use blindspot_core::geometry::{DensityModel, Extractor, FeatureMatrix};
use blindspot_core::data::Split;
use blindspot_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values uniform in `[-0.5, 0.5]`, the pixel range.
pub fn images(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-0.5..=0.5))
}

pub fn features(rows: usize, dim: usize, seed: u64) -> FeatureMatrix {
    let mut r = rng(seed);
    let data = (0..rows * dim).map(|_| r.sample(StandardNormal)).collect();
    FeatureMatrix::new(rows, dim, data, Split::Train, Extractor::Raw).expect("finite features")
}

pub fn gaussian_density(n: usize, shift: f64, seed: u64) -> DensityModel {
    let mut r = rng(seed);
    let pts: Vec<[f64; 2]> = (0..n)
        .map(|_| [r.sample::<f64, _>(StandardNormal) + shift, r.sample(StandardNormal)])
        .collect();
    DensityModel::fit(&pts).expect("at least two points")
}
