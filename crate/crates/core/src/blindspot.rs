//! Scale-and-shift transform `x' = αx + β` on images in `[−0.5, 0.5]`.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformParams {
    alpha: f64,
    beta: f64,
}

impl TransformParams {
    pub const IDENTITY: TransformParams = TransformParams { alpha: 1.0, beta: 0.0 };

    /// Requires `0 < α ≤ 1` and `α/2 + |β| ≤ 0.5`, so that no output ever
    /// leaves the pixel range.
    pub fn new(alpha: f64, beta: f64) -> Result<TransformParams> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(invalid!("alpha must lie in (0, 1], got {}", alpha));
        }
        if !beta.is_finite() {
            return Err(invalid!("beta must be finite"));
        }
        if alpha / 2.0 + beta.abs() > 0.5 {
            return Err(invalid!(
                "alpha = {}, beta = {} leaves the pixel range; |beta| can be at most {:.6}",
                alpha,
                beta,
                0.5 - alpha / 2.0
            ));
        }
        Ok(TransformParams { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn is_identity(&self) -> bool {
        self.alpha == 1.0 && self.beta == 0.0
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &TransformParams) -> Result<TransformParams> {
        TransformParams::new(first.alpha * self.alpha, self.alpha * first.beta + self.beta)
    }
}

pub fn scale_shift(x: &Tensor, params: &TransformParams) -> Result<Tensor> {
    if let Some(v) = x.data().iter().find(|v| !(v.abs() <= 0.5)) {
        return Err(invalid!("pixel {} outside [-0.5, 0.5]", v));
    }
    if params.is_identity() {
        return Ok(x.clone());
    }
    Ok(x.map(|v| params.alpha * v + params.beta))
}

/// The `(α, β)` pairs evaluated for a dataset (`"mnist"` or `"fashion"`).
pub fn param_grid(dataset: &str) -> Result<Vec<TransformParams>> {
    let pairs: &[(f64, f64)] = match dataset {
        "mnist" => &[(1.0, 0.0), (0.9, 0.0), (0.9, 0.05), (0.8, 0.0), (0.8, 0.1), (0.7, 0.0), (0.7, 0.15)],
        "fashion" => &[(1.0, 0.0), (0.95, 0.0), (0.95, 0.025), (0.9, 0.0), (0.9, 0.05)],
        other => return Err(invalid!("unknown dataset tag '{}' (expected mnist or fashion)", other)),
    };
    pairs.iter().map(|&(a, b)| TransformParams::new(a, b)).collect()
}

/// An attack on a transformed image counts only below `α·ε`.
pub fn strict_threshold(params: &TransformParams, epsilon: f64) -> f64 {
    params.alpha * epsilon
}
