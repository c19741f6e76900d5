//! Quantization-aware fine-tuning with fake-quant nodes and a clipped
//! straight-through estimator.

use serde::{Deserialize, Serialize};

use super::{BitConfig, LayerRanges, QuantError, QuantRange, QuantScheme, RangeTracker};
use crate::autodiff::Graph;
use crate::model::{
    evaluate_quantized, train_with, Dataset, ForwardPass, Model, ModelError, OptimizerKind,
    Schedule, StepHook, TrainConfig, TrainReport,
};

/// Fake-quant schemes per quantizable block; `None` leaves the tensor in
/// full precision (used for zero-width ranges).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub weights: Vec<Option<QuantScheme>>,
    pub activations: Vec<Option<QuantScheme>>,
}

fn scheme_for(bits: u32, range: QuantRange) -> Result<Option<QuantScheme>, QuantError> {
    if range.is_degenerate() {
        return Ok(None);
    }
    QuantScheme::from_range(bits, range).map(Some)
}

impl QuantPlan {
    /// Weights quantized over their current extrema, activations over `activation_ranges`.
    pub fn build(model: &Model, bits: &BitConfig, activation_ranges: &[QuantRange]) -> Result<Self, QuantError> {
        bits.check_layers(&model.block_names())?;
        if activation_ranges.len() != model.blocks.len() {
            return Err(QuantError::LayerMismatch(format!(
                "{} activation ranges for {} layers",
                activation_ranges.len(),
                model.blocks.len()
            )));
        }
        let mut weights = Vec::with_capacity(model.blocks.len());
        let mut activations = Vec::with_capacity(model.blocks.len());
        for ((block, lb), &ar) in model.blocks.iter().zip(&bits.layers).zip(activation_ranges) {
            weights.push(scheme_for(lb.w_bits, QuantRange::of(block.weights.data())?)?);
            activations.push(scheme_for(lb.a_bits, ar)?);
        }
        Ok(Self { weights, activations })
    }

    pub fn from_ranges(model: &Model, bits: &BitConfig, ranges: &LayerRanges) -> Result<Self, QuantError> {
        let acts: Vec<QuantRange> = ranges.layers.iter().map(|l| l.activation).collect();
        Self::build(model, bits, &acts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QatConfig {
    pub train: TrainConfig,
    pub ema_decay: f64,
}

impl Default for QatConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 30,
                learning_rate: 0.001,
                schedule: Schedule::Cosine,
                batch_size: 32,
                seed: 0,
                optimizer: OptimizerKind::Adam,
            },
            ema_decay: 0.9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QatOutcome {
    pub model: Model,
    pub activation_ranges: Vec<QuantRange>,
    pub plan: QuantPlan,
    pub report: TrainReport,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

struct QatHook<'a> {
    bits: &'a BitConfig,
    trackers: Vec<RangeTracker>,
}

impl QatHook<'_> {
    fn ranges(&self) -> Result<Vec<QuantRange>, QuantError> {
        self.trackers.iter().map(RangeTracker::range).collect()
    }

    fn plan(&self, model: &Model) -> Result<QuantPlan, QuantError> {
        QuantPlan::build(model, self.bits, &self.ranges()?)
    }
}

fn to_model_error(e: QuantError) -> ModelError {
    match e {
        QuantError::Model(m) => m,
        other => ModelError::InvalidConfig(other.to_string()),
    }
}

impl StepHook for QatHook<'_> {
    fn step_plan(&mut self, model: &Model) -> Result<Option<QuantPlan>, ModelError> {
        self.plan(model).map(Some).map_err(to_model_error)
    }

    fn observe(&mut self, graph: &Graph, pass: &ForwardPass) -> Result<(), ModelError> {
        for (tracker, &site) in self.trackers.iter_mut().zip(&pass.activation_sites) {
            tracker.observe(graph.value(site)?.data()).map_err(to_model_error)?;
        }
        Ok(())
    }

    fn eval_plan(&self, model: &Model) -> Result<Option<QuantPlan>, ModelError> {
        self.plan(model).map(Some).map_err(to_model_error)
    }
}

/// Fine-tunes a copy of `model` with fake quantization per `bits`.
///
/// Weight ranges follow the current weights at every step; activation
/// ranges start from `calibration` and are EMA-updated from each training
/// batch. Accuracies are measured with the final quantization plan.
pub fn qat_finetune(
    model: &Model,
    bits: &BitConfig,
    calibration: &LayerRanges,
    train: &Dataset,
    test: &Dataset,
    cfg: &QatConfig,
) -> Result<QatOutcome, QuantError> {
    bits.check_layers(&model.block_names())?;
    if calibration.names() != model.block_names() {
        return Err(QuantError::LayerMismatch("calibration ranges cover different layers".into()));
    }
    let trackers = calibration
        .layers
        .iter()
        .map(|l| RangeTracker::ema_from(cfg.ema_decay, l.activation))
        .collect::<Result<_, _>>()?;
    let mut hook = QatHook { bits, trackers };
    let mut tuned = model.clone();
    let report = train_with(&mut tuned, train, &cfg.train, &mut hook)?;
    let plan = hook.plan(&tuned)?;
    let train_accuracy = evaluate_quantized(&tuned, train, Some(&plan))?.accuracy;
    let test_accuracy = evaluate_quantized(&tuned, test, Some(&plan))?.accuracy;
    Ok(QatOutcome {
        activation_ranges: hook.ranges()?,
        model: tuned,
        plan,
        report,
        train_accuracy,
        test_accuracy,
    })
}
