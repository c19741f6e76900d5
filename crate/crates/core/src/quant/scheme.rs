//! Uniform affine quantization and the uniform-error noise model.

use serde::{Deserialize, Serialize};

use super::QuantError;
use crate::autodiff::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 32;

/// A closed interval `[min, max]` observed for a weight or activation tensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantRange {
    pub min: f64,
    pub max: f64,
}

impl QuantRange {
    pub fn new(min: f64, max: f64) -> Result<Self, QuantError> {
        if !(min.is_finite() && max.is_finite()) || max < min {
            return Err(QuantError::InvalidRange { min, max });
        }
        Ok(Self { min, max })
    }

    pub fn of(values: &[f64]) -> Result<Self, QuantError> {
        if values.is_empty() {
            return Err(QuantError::EmptyInput);
        }
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Self::new(lo, hi)
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    pub fn is_degenerate(&self) -> bool {
        self.max <= self.min
    }
}

/// Whether the `1/12` factor of the uniform-error model is kept.
///
/// Rank-based comparisons are invariant to the constant, so the default drops it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConvention {
    #[default]
    DropTwelfth,
    WithTwelfth,
}

impl NoiseConvention {
    pub fn factor(self) -> f64 {
        match self {
            NoiseConvention::DropTwelfth => 1.0,
            NoiseConvention::WithTwelfth => 1.0 / 12.0,
        }
    }
}

/// `b`-bit uniform quantizer over `[min, max]` with step `delta = (max - min) / (2^b - 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    bits: u32,
    min: f64,
    max: f64,
    delta: f64,
}

impl QuantScheme {
    pub fn new(bits: u32, min: f64, max: f64) -> Result<Self, QuantError> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(QuantError::InvalidBits(bits));
        }
        let range = QuantRange::new(min, max)?;
        if range.is_degenerate() {
            return Err(QuantError::DegenerateRange { min, max });
        }
        Ok(Self {
            bits,
            min,
            max,
            delta: (max - min) / max_level(bits),
        })
    }

    pub fn from_range(bits: u32, range: QuantRange) -> Result<Self, QuantError> {
        Self::new(bits, range.min, range.max)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    /// Integer grid index of `x` after clamping, in `[0, 2^b - 1]`.
    pub fn level_of(&self, x: f64) -> f64 {
        let clamped = x.clamp(self.min, self.max);
        // f64::round is half-away-from-zero
        ((clamped - self.min) / self.delta)
            .round()
            .clamp(0.0, max_level(self.bits))
    }

    pub fn quantize_value(&self, x: f64) -> f64 {
        self.delta * self.level_of(x) + self.min
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max
    }

    /// Expected squared quantization error `delta^2` (times `1/12` when kept).
    pub fn noise_power(&self, convention: NoiseConvention) -> f64 {
        self.delta * self.delta * convention.factor()
    }
}

fn max_level(bits: u32) -> f64 {
    ((1u64 << bits) - 1) as f64
}

pub fn quantize_uniform(x: &Tensor, scheme: &QuantScheme) -> Tensor {
    let data = x.data().iter().map(|&v| scheme.quantize_value(v)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub fn noise_power(scheme: &QuantScheme, convention: NoiseConvention) -> f64 {
    scheme.noise_power(convention)
}

/// Per-value noise power for a tensor quantized to `bits` over `range`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub value: f64,
    pub convention: NoiseConvention,
    /// Set when the range had zero width; the value is then 0.
    pub degenerate: bool,
}

impl NoiseEstimate {
    pub fn for_range(
        range: QuantRange,
        bits: u32,
        convention: NoiseConvention,
    ) -> Result<Self, QuantError> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(QuantError::InvalidBits(bits));
        }
        if range.is_degenerate() {
            return Ok(Self {
                value: 0.0,
                convention,
                degenerate: true,
            });
        }
        let delta = range.width() / max_level(bits);
        Ok(Self {
            value: delta * delta * convention.factor(),
            convention,
            degenerate: false,
        })
    }
}
