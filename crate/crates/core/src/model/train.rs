//! Mini-batch training and evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, ForwardPass, Mode, Model, ModelError};
use crate::autodiff::{Graph, Tensor};
use crate::quant::QuantPlan;
use crate::rng;

const EVAL_BATCH: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// `lr * (1 + cos(pi * epoch / epochs)) / 2`, stepped per epoch.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.01,
            schedule: Schedule::Cosine,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted and turns training into a no-op.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 {
            return Err(ModelError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "learning_rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean loss over the full training set after the epoch.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(self.initial_loss, |r| r.loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Per-step callbacks used by quantization-aware training.
pub trait StepHook {
    /// Quantization applied to the next training step.
    fn step_plan(&mut self, model: &Model) -> Result<Option<QuantPlan>, ModelError>;
    /// Sees the recorded training step after its forward pass.
    fn observe(&mut self, graph: &Graph, pass: &ForwardPass) -> Result<(), ModelError>;
    /// Quantization used when measuring the per-epoch loss.
    fn eval_plan(&self, model: &Model) -> Result<Option<QuantPlan>, ModelError>;
}

/// Full-precision training.
pub struct NoHook;

impl StepHook for NoHook {
    fn step_plan(&mut self, _: &Model) -> Result<Option<QuantPlan>, ModelError> {
        Ok(None)
    }

    fn observe(&mut self, _: &Graph, _: &ForwardPass) -> Result<(), ModelError> {
        Ok(())
    }

    fn eval_plan(&self, _: &Model) -> Result<Option<QuantPlan>, ModelError> {
        Ok(None)
    }
}

enum Optimizer {
    Sgd,
    Adam { m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: i32 },
}

impl Optimizer {
    fn new(kind: OptimizerKind, model: &mut Model) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => {
                let zeros: Vec<Vec<f64>> = model.parameters_mut().iter().map(|p| vec![0.0; p.len()]).collect();
                Self::Adam {
                    m: zeros.clone(),
                    v: zeros,
                    t: 0,
                }
            }
        }
    }

    fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        match self {
            Self::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    p.iter_mut().zip(*g).for_each(|(p, g)| *p -= lr * g);
                }
            }
            Self::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    for i in 0..p.len() {
                        m[k][i] = B1 * m[k][i] + (1.0 - B1) * g[i];
                        v[k][i] = B2 * v[k][i] + (1.0 - B2) * g[i] * g[i];
                        let mh = m[k][i] / c1;
                        let vh = v[k][i] / c2;
                        p[i] -= lr * mh / (vh.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, ModelError> {
    train_with(model, data, cfg, &mut NoHook)
}

/// Trains in place. Batches are drawn by a per-epoch shuffle seeded from `cfg.seed`.
pub fn train_with(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    hook: &mut dyn StepHook,
) -> Result<TrainReport, ModelError> {
    cfg.validate()?;
    check_compatible(model, data)?;
    let initial_loss = evaluate_quantized(model, data, hook.eval_plan(model)?.as_ref())?.mean_loss;
    if !initial_loss.is_finite() {
        return Err(ModelError::Diverged { epoch: 0 });
    }
    let mut rng = rng::seeded(rng::derive(cfg.seed, 0x5452_4149));
    let mut optimizer = Optimizer::new(cfg.optimizer, model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        for rows in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(rows);
            let plan = hook.step_plan(model)?;
            let mut graph = Graph::new();
            let xn = graph.constant(x);
            let pass = model.forward(&mut graph, xn, Mode::Train, plan.as_ref())?;
            let loss = graph.softmax_cross_entropy(pass.logits, &y)?;
            if !graph.value(loss)?.item().is_finite() {
                return Err(ModelError::Diverged { epoch });
            }
            hook.observe(&graph, &pass)?;
            let grads = graph.grad(loss, None, &pass.params)?;
            let grad_values: Vec<&[f64]> = grads
                .iter()
                .map(|&g| graph.value(g).map(Tensor::data))
                .collect::<Result<_, _>>()?;
            if grad_values.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(ModelError::Diverged { epoch });
            }
            optimizer.step(model.parameters_mut(), &grad_values, lr);
            model.update_running_stats(&graph, &pass)?;
        }
        let loss = evaluate_quantized(model, data, hook.eval_plan(model)?.as_ref())?.mean_loss;
        if !loss.is_finite() {
            return Err(ModelError::Diverged { epoch });
        }
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            loss,
        });
    }
    Ok(TrainReport {
        initial_loss,
        history,
    })
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<(), ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if data.example_shape() != model.input_shape.as_slice() {
        return Err(ModelError::InvalidData(format!(
            "examples of shape {:?}, model expects {:?}",
            data.example_shape(),
            model.input_shape
        )));
    }
    if data.num_classes() != model.num_classes {
        return Err(ModelError::InvalidData(format!(
            "dataset has {} classes, model outputs {}",
            data.num_classes(),
            model.num_classes
        )));
    }
    Ok(())
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation, ModelError> {
    evaluate_quantized(model, data, None)
}

/// Accuracy and mean cross-entropy in eval mode. Per-example losses are
/// sorted before summation, so the result does not depend on row order.
pub fn evaluate_quantized(
    model: &Model,
    data: &Dataset,
    quant: Option<&QuantPlan>,
) -> Result<Evaluation, ModelError> {
    check_compatible(model, data)?;
    let k = model.num_classes;
    let mut correct = 0usize;
    let mut losses = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let logits = model.predict(&data.inputs().slice_leading(start, end), quant)?;
        for (row, &y) in logits.data().chunks(k).zip(&data.labels()[start..end]) {
            let (arg, max) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
            if arg == y {
                correct += 1;
            }
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            losses.push(lse - row[y]);
        }
    }
    losses.sort_by(f64::total_cmp);
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        mean_loss: losses.iter().sum::<f64>() / data.len() as f64,
    })
}
