//! Empirical-Fisher trace estimators and the dense EF oracle.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;

use super::engine::ExampleProgram;
use super::{ConvergenceMonitor, EstimatorKind, SensitivityError, TraceConfig, TraceReport};
use crate::autodiff::ORACLE_PARAM_LIMIT;
use crate::model::{Dataset, Model};
use crate::rng;

/// Rows for one iteration: the whole set in order when the batch covers it,
/// otherwise a uniform draw without replacement.
pub(crate) fn draw_rows(rng: &mut rng::Rng, n: usize, batch: usize) -> Vec<usize> {
    if batch >= n {
        (0..n).collect()
    } else {
        index::sample(rng, n, batch).into_vec()
    }
}

fn check_data(model: &Model, data: &Dataset) -> Result<(), SensitivityError> {
    if data.is_empty() {
        return Err(SensitivityError::InvalidArgument("dataset is empty".into()));
    }
    if data.example_shape() != model.input_shape.as_slice() || data.num_classes() != model.num_classes {
        return Err(SensitivityError::InvalidArgument(
            "dataset does not match the model's input or class count".into(),
        ));
    }
    Ok(())
}

fn run_ef(model: &Model, data: &Dataset, cfg: &TraceConfig, kind: EstimatorKind) -> Result<TraceReport, SensitivityError> {
    cfg.validate()?;
    check_data(model, data)?;
    let mut program = ExampleProgram::new(model)?;
    let names = model.block_names();
    let elements = match kind {
        EstimatorKind::EfWeight => model.blocks.iter().map(|b| b.n()).collect(),
        _ => program.site_elements()?,
    };
    let mut rng = rng::seeded(cfg.stream_seed(kind));
    let mut monitor = ConvergenceMonitor::new(names.len(), cfg.convergence)?;
    let batch = cfg.batch_size.min(data.len());
    for iteration in 0..cfg.max_iters {
        let rows = draw_rows(&mut rng, data.len(), batch);
        let mut sums = vec![0.0; names.len()];
        for &r in &rows {
            let norms = program.norms(data.inputs().slice_leading(r, r + 1), data.labels()[r])?;
            let values = match kind {
                EstimatorKind::EfWeight => norms.weights,
                _ => norms.sites,
            };
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
        }
        let estimates: Vec<f64> = sums.iter().map(|s| s / rows.len() as f64).collect();
        if let Some(block) = estimates.iter().position(|v| !v.is_finite()) {
            return Err(SensitivityError::NonFinite {
                block: names[block].clone(),
                iteration,
            });
        }
        if monitor.push(&estimates)? {
            break;
        }
    }
    Ok(TraceReport::from_monitor(kind, cfg, batch, &names, &elements, &monitor))
}

/// Per-block mean of per-example squared weight-gradient norms.
pub fn ef_weight_trace(model: &Model, data: &Dataset, cfg: &TraceConfig) -> Result<TraceReport, SensitivityError> {
    run_ef(model, data, cfg, EstimatorKind::EfWeight)
}

/// Per-site mean of per-example squared gradient norms with respect to the
/// input activation of each quantizable block (summed over its elements).
pub fn ef_activation_trace(model: &Model, data: &Dataset, cfg: &TraceConfig) -> Result<TraceReport, SensitivityError> {
    run_ef(model, data, cfg, EstimatorKind::EfActivation)
}

/// Dense `(1/N) sum_i g_i g_i^T` over the quantizable weights.
#[derive(Clone, Debug)]
pub struct EmpiricalFisher {
    pub matrix: DMatrix<f64>,
    pub examples: usize,
}

impl EmpiricalFisher {
    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.matrix.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn empirical_fisher_matrix(model: &Model, data: &Dataset) -> Result<EmpiricalFisher, SensitivityError> {
    check_data(model, data)?;
    let count = model.quantizable_parameter_count();
    if count > ORACLE_PARAM_LIMIT {
        return Err(SensitivityError::OracleLimit {
            count,
            limit: ORACLE_PARAM_LIMIT,
        });
    }
    let mut program = ExampleProgram::new(model)?;
    let mut matrix = DMatrix::zeros(count, count);
    for r in 0..data.len() {
        let g = DVector::from_vec(program.flat_weight_gradient(data.inputs().slice_leading(r, r + 1), data.labels()[r])?);
        matrix.ger(1.0, &g, &g, 1.0);
    }
    matrix /= data.len() as f64;
    Ok(EmpiricalFisher {
        matrix,
        examples: data.len(),
    })
}
