//! Quantization range estimation for weights and activations.

use serde::{Deserialize, Serialize};

use super::{QuantError, QuantRange};
use crate::autodiff::Graph;
use crate::model::{Dataset, Mode, Model, ModelError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum RangeMode {
    MinMax,
    /// `estimate = decay * estimate + (1 - decay) * batch_extremum`.
    Ema { decay: f64 },
}

/// Running `[min, max]` estimate over a stream of batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeTracker {
    mode: RangeMode,
    estimate: Option<(f64, f64)>,
    batches: usize,
}

impl RangeTracker {
    pub fn min_max() -> Self {
        Self {
            mode: RangeMode::MinMax,
            estimate: None,
            batches: 0,
        }
    }

    /// `decay` must lie in `[0, 1)`; 0 keeps only the latest batch.
    pub fn ema(decay: f64) -> Result<Self, QuantError> {
        if !(0.0..1.0).contains(&decay) {
            return Err(QuantError::InvalidConfig(format!("EMA decay {decay} outside [0, 1)")));
        }
        Ok(Self {
            mode: RangeMode::Ema { decay },
            estimate: None,
            batches: 0,
        })
    }

    /// EMA tracker whose estimate starts from `range` instead of the first batch.
    pub fn ema_from(decay: f64, range: QuantRange) -> Result<Self, QuantError> {
        let mut t = Self::ema(decay)?;
        t.estimate = Some((range.min, range.max));
        Ok(t)
    }

    pub fn mode(&self) -> RangeMode {
        self.mode
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn observe(&mut self, values: &[f64]) -> Result<(), QuantError> {
        let batch = QuantRange::of(values)?;
        self.estimate = Some(match (self.estimate, self.mode) {
            (None, _) => (batch.min, batch.max),
            (Some((lo, hi)), RangeMode::MinMax) => (lo.min(batch.min), hi.max(batch.max)),
            (Some((lo, hi)), RangeMode::Ema { decay }) => (
                decay * lo + (1.0 - decay) * batch.min,
                decay * hi + (1.0 - decay) * batch.max,
            ),
        });
        self.batches += 1;
        Ok(())
    }

    pub fn range(&self) -> Result<QuantRange, QuantError> {
        let (lo, hi) = self.estimate.ok_or(QuantError::EmptyInput)?;
        QuantRange::new(lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub batch_size: usize,
    pub ema_decay: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            ema_decay: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRange {
    pub layer: String,
    pub weight: QuantRange,
    /// Range of the layer's input activation.
    pub activation: QuantRange,
}

impl LayerRange {
    pub fn weight_degenerate(&self) -> bool {
        self.weight.is_degenerate()
    }

    pub fn activation_degenerate(&self) -> bool {
        self.activation.is_degenerate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRanges {
    pub layers: Vec<LayerRange>,
}

impl LayerRanges {
    pub fn get(&self, layer: &str) -> Option<&LayerRange> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.layer.clone()).collect()
    }
}

/// Exact weight extrema plus EMA activation extrema over one pass of `data`
/// in dataset order (eval mode, full precision).
pub fn track_ranges(model: &Model, data: &Dataset, cfg: &CalibrationConfig) -> Result<LayerRanges, QuantError> {
    if data.is_empty() {
        return Err(QuantError::EmptyInput);
    }
    if cfg.batch_size == 0 {
        return Err(QuantError::InvalidConfig("calibration batch_size must be >= 1".into()));
    }
    let mut trackers = model
        .blocks
        .iter()
        .map(|_| RangeTracker::ema(cfg.ema_decay))
        .collect::<Result<Vec<_>, _>>()?;
    for start in (0..data.len()).step_by(cfg.batch_size) {
        let end = (start + cfg.batch_size).min(data.len());
        let mut graph = Graph::new();
        let x = graph.constant(data.inputs().slice_leading(start, end));
        let pass = model.forward(&mut graph, x, Mode::Eval, None)?;
        for (tracker, &site) in trackers.iter_mut().zip(&pass.activation_sites) {
            tracker.observe(graph.value(site).map_err(ModelError::from)?.data())?;
        }
    }
    let layers = model
        .blocks
        .iter()
        .zip(&trackers)
        .map(|(block, tracker)| {
            Ok(LayerRange {
                layer: block.name.clone(),
                weight: QuantRange::of(block.weights.data())?,
                activation: tracker.range()?,
            })
        })
        .collect::<Result<_, QuantError>>()?;
    Ok(LayerRanges { layers })
}
