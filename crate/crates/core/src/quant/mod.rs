//! Uniform quantization, the quantization-noise model, range tracking and
//! quantization-aware training.

mod bits;
mod qat;
mod ranges;
mod scheme;

use thiserror::Error;

use crate::model::ModelError;

pub use bits::{BitConfig, LayerBits, DEFAULT_BIT_SET};
pub use qat::{qat_finetune, QatConfig, QatOutcome, QuantPlan};
pub use ranges::{track_ranges, CalibrationConfig, LayerRange, LayerRanges, RangeMode, RangeTracker};
pub use scheme::{
    noise_power, quantize_uniform, NoiseConvention, NoiseEstimate, QuantRange, QuantScheme,
    MAX_BITS, MIN_BITS,
};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("bit width {0} outside [{MIN_BITS}, {MAX_BITS}]")]
    InvalidBits(u32),
    #[error("invalid range [{min}, {max}]")]
    InvalidRange { min: f64, max: f64 },
    #[error("degenerate range [{min}, {max}]: zero width")]
    DegenerateRange { min: f64, max: f64 },
    #[error("no values observed")]
    EmptyInput,
    #[error("{0}")]
    InvalidConfig(String),
    #[error("bit configuration does not match model: {0}")]
    LayerMismatch(String),
    #[error("serialization: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl QuantError {
    /// True for non-finite values and divergence, as opposed to invalid input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Self::Model(e) => e.is_numerical(),
            _ => false,
        }
    }
}
