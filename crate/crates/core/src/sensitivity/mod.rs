//! Trace estimators (empirical Fisher and Hutchinson), convergence
//! monitoring, the FIT score and its baselines.

mod agreement;
mod ef;
mod engine;
mod fit;
mod hutchinson;
mod monitor;
mod trace;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::model::ModelError;
use crate::quant::QuantError;

pub use agreement::{
    expected_hessian_trace, fisher_hessian_agreement, fisher_hessian_agreement_with, fisher_hessian_gaps,
    gaussian_fisher_hessian_agreement, sampled_fisher_trace, Agreement, GapSummary, LabelSource,
};
pub use ef::{ef_activation_trace, ef_weight_trace, empirical_fisher_matrix, EmpiricalFisher};
pub use fit::{fit_metric, heuristic_score, FitBlock, FitReport, Heuristic, LayerSignals, SensitivityProfile};
pub use hutchinson::{hutchinson_matrix, hutchinson_trace, hutchinson_variance_predict};
pub use monitor::{sample_variance, BlockDiagnostics, ConvergenceConfig, ConvergenceMonitor};
pub use trace::{BlockTrace, EstimatorKind, Normalization, TraceConfig, TraceReport};

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("{0}")]
    InvalidArgument(String),
    #[error("non-finite estimate for block `{block}` at iteration {iteration}")]
    NonFinite { block: String, iteration: usize },
    #[error("{count} parameters exceed the dense oracle limit of {limit}")]
    OracleLimit { count: usize, limit: usize },
    #[error("no entry for layer `{0}`")]
    MissingLayer(String),
    #[error("report format: {0}")]
    Format(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

impl SensitivityError {
    /// True for non-finite values and divergence, as opposed to invalid input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Self::NonFinite { .. } => true,
            Self::Autodiff(e) => e.is_numerical(),
            Self::Model(e) => e.is_numerical(),
            Self::Quant(e) => e.is_numerical(),
            _ => false,
        }
    }
}
