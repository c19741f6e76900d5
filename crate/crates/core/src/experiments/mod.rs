//! Desk-scale evaluation protocols: bit-configuration sweeps, rank
//! correlation of heuristics against accuracy, the EF/Hutchinson estimator
//! benchmark and budgeted configuration ranking.

mod bench;
mod correlate;
mod desk;
mod select;
mod sweep;

pub use bench::{
    benchmark_estimators, relative_speedup, BenchConfig, EstimatorBenchmark, EstimatorStats, ReferenceSpeedup,
};
pub use correlate::{correlate, correlate_rows, spearman, CorrelationReport, Correlations};
pub use desk::{DeskRun, DeskSetup};
pub use select::{rank_configs, BudgetViolation, RankedConfig, Ranking};
pub use sweep::{profile_model, run_sweep, run_sweep_with_profile, ModelProfile, SweepConfig, SweepResult, SweepRow};

use thiserror::Error;

use crate::model::ModelError;
use crate::quant::QuantError;
use crate::sensitivity::SensitivityError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("not enough completed rows: {completed} (need at least {needed})")]
    TooFewRows { completed: usize, needed: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// True for non-finite values and divergence, as opposed to invalid input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Self::Model(e) => e.is_numerical(),
            Self::Quant(e) => e.is_numerical(),
            Self::Sensitivity(e) => e.is_numerical(),
            _ => false,
        }
    }
}

fn check_schema(version: u32, what: &str) -> Result<(), ExperimentError> {
    if version != crate::SCHEMA_VERSION {
        return Err(ExperimentError::Format(format!(
            "{what} schema version {version}, expected {}",
            crate::SCHEMA_VERSION
        )));
    }
    Ok(())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
