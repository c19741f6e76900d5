//! Fisher-information-trace (FIT) sensitivity analysis for mixed-precision
//! quantization of small neural networks.
//!
//! - [`autodiff`]: tensors and a reverse-mode graph with Hessian-vector products.
//! - [`model`]: small convolutional classifiers, synthetic data, training.
//! - [`quant`]: uniform quantization, noise model, range tracking, QAT.
//! - [`sensitivity`]: EF and Hutchinson trace estimators, FIT and baselines.
//! - [`experiments`]: bit-configuration sweeps, rank correlation, estimator benchmark.

pub mod autodiff;
pub mod experiments;
pub mod model;
pub mod quant;
pub mod sensitivity;

pub(crate) mod rng;

/// Version tag written into every serialized document.
pub const SCHEMA_VERSION: u32 = 1;
