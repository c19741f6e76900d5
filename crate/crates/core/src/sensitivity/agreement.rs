//! Agreement between the sampled Fisher trace and the expected Hessian trace.

use rand_distr::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use super::engine::{BatchHessian, ExampleProgram};
use super::SensitivityError;
use crate::autodiff::{Graph, HvpProgram, Tensor, ORACLE_PARAM_LIMIT};
use crate::model::Model;
use crate::rng;

/// Relative traces below this are reported as indeterminate.
const TRACE_FLOOR: f64 = 1e-12;

/// Where the labels of the Fisher samples come from.
#[derive(Clone, Copy, Debug)]
pub enum LabelSource<'a> {
    /// The model's own predictive distribution (realizable regime).
    Model,
    /// The predictive distribution of a different model over the same inputs.
    Teacher(&'a Model),
    /// Fixed labels, one per input (the empirical Fisher).
    Labels(&'a [usize]),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub budget: usize,
    pub fisher_trace: f64,
    pub hessian_trace: f64,
    /// `|Tr F - Tr H| / |Tr H|`; `None` when `Tr H` is numerically zero.
    pub gap: Option<f64>,
}

impl Agreement {
    fn new(budget: usize, fisher_trace: f64, hessian_trace: f64) -> Self {
        let gap = (hessian_trace.abs() > TRACE_FLOOR)
            .then(|| (fisher_trace - hessian_trace).abs() / hessian_trace.abs());
        Self {
            budget,
            fisher_trace,
            hessian_trace,
            gap,
        }
    }
}

fn probabilities(model: &Model, inputs: &Tensor) -> Result<Vec<Vec<f64>>, SensitivityError> {
    let logits = model.predict(inputs, None)?;
    Ok(logits
        .data()
        .chunks(model.num_classes)
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect())
}

/// Trace of the Hessian of `(1/N) sum_x E_{y ~ p(y|x)}[loss(x, y)]` over the
/// weight blocks, with `p` the model's own predictive distribution held fixed.
pub fn expected_hessian_trace(model: &Model, inputs: &Tensor) -> Result<f64, SensitivityError> {
    let count = model.quantizable_parameter_count();
    if count > ORACLE_PARAM_LIMIT {
        return Err(SensitivityError::OracleLimit {
            count,
            limit: ORACLE_PARAM_LIMIT,
        });
    }
    let n = inputs.shape()[0];
    let probs = probabilities(model, inputs)?;
    let soft = Tensor::new(vec![n, model.num_classes], probs.concat())?;
    let mut hessian = BatchHessian::new(model, n)?;
    hessian.load(inputs.clone(), soft)?;
    let mut e = vec![0.0; count];
    let mut trace = 0.0;
    for j in 0..count {
        e[j] = 1.0;
        trace += hessian.apply(&e)?[j];
        e[j] = 0.0;
    }
    Ok(trace)
}

/// Mean squared weight-gradient norm over `budget` samples: input `s mod N`
/// with a label drawn from `labels`.
pub fn sampled_fisher_trace(
    model: &Model,
    inputs: &Tensor,
    labels: LabelSource<'_>,
    budget: usize,
    seed: u64,
) -> Result<f64, SensitivityError> {
    if budget == 0 {
        return Err(SensitivityError::InvalidArgument("sampling budget must be >= 1".into()));
    }
    let n = inputs.shape()[0];
    let probs = match labels {
        LabelSource::Model => Some(probabilities(model, inputs)?),
        LabelSource::Teacher(t) => Some(probabilities(t, inputs)?),
        LabelSource::Labels(l) => {
            if l.len() != n || l.iter().any(|&y| y >= model.num_classes) {
                return Err(SensitivityError::InvalidArgument(format!(
                    "{} labels for {n} inputs, or a label out of range",
                    l.len()
                )));
            }
            None
        }
    };
    let samplers = probs
        .iter()
        .flatten()
        .map(|p| WeightedIndex::new(p).map_err(|e| SensitivityError::InvalidArgument(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = rng::seeded(seed);
    let mut program = ExampleProgram::new(model)?;
    let rows: Vec<Tensor> = (0..n).map(|i| inputs.slice_leading(i, i + 1)).collect();
    let mut total = 0.0;
    for s in 0..budget {
        let i = s % n;
        let y = match labels {
            LabelSource::Labels(l) => l[i],
            _ => samplers[i].sample(&mut rng),
        };
        total += program.norms(rows[i].clone(), y)?.weights.iter().sum::<f64>();
    }
    Ok(total / budget as f64)
}

/// Relative gap between the model-sampled Fisher trace and the expected Hessian trace.
pub fn fisher_hessian_agreement(
    model: &Model,
    inputs: &Tensor,
    budget: usize,
    seed: u64,
) -> Result<Agreement, SensitivityError> {
    fisher_hessian_agreement_with(model, inputs, LabelSource::Model, budget, seed)
}

pub fn fisher_hessian_agreement_with(
    model: &Model,
    inputs: &Tensor,
    labels: LabelSource<'_>,
    budget: usize,
    seed: u64,
) -> Result<Agreement, SensitivityError> {
    let h = expected_hessian_trace(model, inputs)?;
    let f = sampled_fisher_trace(model, inputs, labels, budget, seed)?;
    Ok(Agreement::new(budget, f, h))
}

/// Mean gap over `repeats` independent Fisher samples at one budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub budget: usize,
    pub hessian_trace: f64,
    pub fisher_traces: Vec<f64>,
    /// `None` when the Hessian trace is numerically zero.
    pub mean_gap: Option<f64>,
}

/// Gaps for each budget, `repeats` Fisher samples apiece, against one
/// exact Hessian trace. Seeds are derived from `seed`, budget and repeat.
pub fn fisher_hessian_gaps(
    model: &Model,
    inputs: &Tensor,
    labels: LabelSource<'_>,
    budgets: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<GapSummary>, SensitivityError> {
    if repeats == 0 {
        return Err(SensitivityError::InvalidArgument("repeats must be >= 1".into()));
    }
    let h = expected_hessian_trace(model, inputs)?;
    budgets
        .iter()
        .enumerate()
        .map(|(b, &budget)| {
            let fisher_traces = (0..repeats)
                .map(|r| {
                    let stream = rng::derive(rng::derive(seed, b as u64), r as u64);
                    sampled_fisher_trace(model, inputs, labels, budget, stream)
                })
                .collect::<Result<Vec<f64>, _>>()?;
            let mean_gap = (h.abs() > TRACE_FLOOR).then(|| {
                fisher_traces.iter().map(|f| (f - h).abs()).sum::<f64>() / (repeats as f64 * h.abs())
            });
            Ok(GapSummary {
                budget,
                hessian_trace: h,
                fisher_traces,
                mean_gap,
            })
        })
        .collect()
}

/// Linear regression `y = x.w + e`, `e ~ N(0, 1)`, squared loss. The Fisher
/// expectation over `e` is taken by three-point Gauss-Hermite quadrature,
/// which is exact for the quadratic integrand.
pub fn gaussian_fisher_hessian_agreement(inputs: &Tensor, w: &[f64]) -> Result<Agreement, SensitivityError> {
    let [n, d] = match inputs.shape() {
        [n, d] => [*n, *d],
        s => {
            return Err(SensitivityError::InvalidArgument(format!(
                "inputs must be [N, D], got {s:?}"
            )))
        }
    };
    if w.len() != d {
        return Err(SensitivityError::InvalidArgument(format!("{} weights for {d} features", w.len())));
    }
    let mut g = Graph::new();
    let x = g.input(&[1, d]);
    let y = g.input(&[1]);
    let wn = g.param(Tensor::new(vec![d, 1], w.to_vec())?);
    let pred = g.matmul(x, wn)?;
    let pred = g.reshape(pred, &[1])?;
    let diff = g.sub(pred, y)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum_all(sq)?;
    let loss = g.scale(total, 0.5)?;
    g.set_outputs(&[loss]);
    g.forward(&[Tensor::zeros(&[1, d]), Tensor::zeros(&[1])])?;
    let grad = g.grad(loss, None, &[wn])?[0];
    let program = HvpProgram::new(&mut g, loss, &[wn])?;

    let s3 = 3f64.sqrt();
    let nodes = [(-s3, 1.0 / 6.0), (0.0, 2.0 / 3.0), (s3, 1.0 / 6.0)];
    let mut fisher = 0.0;
    let mut hessian = 0.0;
    for i in 0..n {
        let xi = inputs.slice_leading(i, i + 1);
        let mean: f64 = xi.data().iter().zip(w).map(|(a, b)| a * b).sum();
        for (eps, weight) in nodes {
            g.forward(&[xi.clone(), Tensor::from_vec(vec![mean + eps])])?;
            fisher += weight * g.value(grad)?.squared_norm();
        }
        let mut e = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            hessian += program.apply(&mut g, &e)?[j];
            e[j] = 0.0;
        }
    }
    Ok(Agreement::new(0, fisher / n as f64, hessian / n as f64))
}
