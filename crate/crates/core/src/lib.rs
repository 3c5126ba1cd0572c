//! Hybrid pedestrian motion prediction with calibrated uncertainty.
//!
//! Mean future positions come from a goal predictor feeding a Social Force
//! Model rollout; per-step bi-variate Gaussian spread (σx, σy, ρ) comes from a
//! conditional variational autoencoder. The crate also ships the first-order
//! covariance propagation baseline and the calibration metrics used to score
//! both predictors.

mod binio;
pub mod covnet;
pub mod covprop;
pub mod dataset;
mod error;
pub mod gauss;
pub mod goalnet;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod sfm;
pub mod train;

pub use error::{Error, Result};
pub use gauss::{DiagGaussianN, Gaussian2D, Vec2};

/// Observed steps per window.
pub const OBS_LEN: usize = 8;
/// Predicted steps per window.
pub const PRED_LEN: usize = 12;
/// Seconds between consecutive annotated steps.
pub const DT: f64 = 0.4;
