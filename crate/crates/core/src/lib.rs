//! Adversarially robust small-image classifiers and the geometry of their
//! failures.
//!
//! The crate trains small CNNs naturally or with PGD-based min-max training,
//! measures how far test points sit from the training set in a learned
//! embedding, estimates train/test divergence with 2-D KDE, and runs
//! minimal-distortion L∞ attacks on scaled-and-shifted ("blind-spot") inputs.

pub mod attack;
pub mod blindspot;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
