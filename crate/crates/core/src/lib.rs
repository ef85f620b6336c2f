//! Sharpness-aware optimizers whose perturbation can be steered away from
//! the full-gradient direction, plus the models, data, diagnostics, and
//! experiment harness needed to study them on small problems.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the harness, the metrics
//! files, and checkpoints use.

#[macro_use]
mod keyword;

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod model;
pub mod numkit;
pub mod optim;
pub mod scalar;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use harness::RunRecord;
pub use scalar::Scalar;

pub type ParamVector = numkit::ParamVec<f64>;
pub type EmaState = numkit::EmaState<f64>;
pub type Decomposition = numkit::Decomposition<f64>;
pub type Batch = model::Batch<f64>;
pub type Dataset = data::Dataset<f64>;
pub type OptimizerState = optim::OptimizerState<f64>;
pub type StepReport = optim::StepReport<f64>;
