//! Functional competing-risks networks: discrete-time cause-specific and
//! sub-distribution hazard models with learnable bases for functional
//! covariates, Langevin-based imputation of missing tabular covariates,
//! a synthetic data generator and Brier-score evaluation.

pub mod basis;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod mvi;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
