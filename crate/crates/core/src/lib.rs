//! Label-shift classification laboratory.
//!
//! Prior-compensated softmax, the label-distribution-disentangling losses,
//! Gaussian-mixture worlds with exact Bayes posteriors, a small MLP trainer
//! and calibration metrics, all on top of a minimal reverse-mode autodiff
//! engine.

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod label_space;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod synthetic;
pub mod trainer;
