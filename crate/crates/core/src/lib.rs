//! Consensus multi-model Kalman filtering for planar vehicle state estimation.
//!
//! Several predictors (a physics bicycle model, a random-feature regressor, a
//! bilinear Koopman model) each produce a Gaussian forecast; the forecasts are
//! fused into one consensus belief, corrected with sensor data, and fed back.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod ensemble;
pub mod error;
pub mod filter;
pub mod fusion;
pub mod koopman;
pub mod linalg;
pub mod models;
pub mod persist;
pub mod pipeline;
pub mod simulator;

pub use config::RunConfig;
pub use error::{Error, Phase, Result};
pub use pipeline::{run_pipeline, EvaluationReport, PipelineOutput};
pub use linalg::{Covariance, ModelBelief};
