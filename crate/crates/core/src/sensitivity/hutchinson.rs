//! Hutchinson trace estimation with Rademacher probes.

use nalgebra::DMatrix;
use rand::Rng as _;

use super::ef::draw_rows;
use super::engine::BatchHessian;
use super::{ConvergenceConfig, ConvergenceMonitor, EstimatorKind, SensitivityError, TraceConfig, TraceReport};
use crate::model::{Dataset, Model};
use crate::rng;

fn rademacher(rng: &mut rng::Rng, out: &mut [f64]) {
    for v in out {
        *v = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    }
}

/// Per-block `r^T H_ll r` on the mini-batch Hessian of the mean loss with
/// respect to each block's weights, one block-restricted probe per block.
pub fn hutchinson_trace(model: &Model, data: &Dataset, cfg: &TraceConfig) -> Result<TraceReport, SensitivityError> {
    cfg.validate()?;
    if data.is_empty() || data.example_shape() != model.input_shape.as_slice() {
        return Err(SensitivityError::InvalidArgument("dataset does not match the model".into()));
    }
    let batch = cfg.batch_size.min(data.len());
    let mut hessian = BatchHessian::new(model, batch)?;
    let names = model.block_names();
    let sizes = hessian.block_sizes().to_vec();
    let total: usize = sizes.iter().sum();
    let mut rng = rng::seeded(cfg.stream_seed(EstimatorKind::Hutchinson));
    let mut monitor = ConvergenceMonitor::new(names.len(), cfg.convergence)?;
    let mut v = vec![0.0; total];
    for iteration in 0..cfg.max_iters {
        let rows = draw_rows(&mut rng, data.len(), batch);
        let (x, y) = data.batch(&rows);
        hessian.load_labels(x, &y)?;
        let mut estimates = Vec::with_capacity(names.len());
        let mut offset = 0;
        for (block, &n) in sizes.iter().enumerate() {
            v.iter_mut().for_each(|e| *e = 0.0);
            rademacher(&mut rng, &mut v[offset..offset + n]);
            let hv = hessian.apply(&v)?;
            let value: f64 = (offset..offset + n).map(|i| v[i] * hv[i]).sum();
            if !value.is_finite() {
                return Err(SensitivityError::NonFinite {
                    block: names[block].clone(),
                    iteration,
                });
            }
            estimates.push(value);
            offset += n;
        }
        if monitor.push(&estimates)? {
            break;
        }
    }
    Ok(TraceReport::from_monitor(
        EstimatorKind::Hutchinson,
        cfg,
        batch,
        &names,
        &sizes,
        &monitor,
    ))
}

/// Hutchinson estimate of an explicit symmetric matrix, `m` probes, no early stop.
pub fn hutchinson_matrix(h: &DMatrix<f64>, m: usize, seed: u64) -> Result<TraceReport, SensitivityError> {
    if !h.is_square() || h.nrows() == 0 {
        return Err(SensitivityError::InvalidArgument(format!(
            "matrix must be square and nonempty, got {}x{}",
            h.nrows(),
            h.ncols()
        )));
    }
    let cfg = TraceConfig {
        batch_size: 1,
        max_iters: m.max(1),
        seed,
        convergence: ConvergenceConfig {
            tolerance: 0.0,
            window: 2,
        },
    };
    let n = h.nrows();
    let mut rng = rng::seeded(cfg.stream_seed(EstimatorKind::Hutchinson));
    let mut monitor = ConvergenceMonitor::new(1, cfg.convergence)?;
    let mut r = vec![0.0; n];
    for _ in 0..cfg.max_iters {
        rademacher(&mut rng, &mut r);
        let mut value = 0.0;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| h[(i, j)] * r[j]).sum();
            value += r[i] * row;
        }
        monitor.push(&[value])?;
    }
    Ok(TraceReport::from_monitor(
        EstimatorKind::Hutchinson,
        &cfg,
        1,
        &["matrix".to_string()],
        &[n],
        &monitor,
    ))
}

/// Per-probe variance `2 (||H||_F^2 - sum_i H_ii^2)` of Rademacher probes on symmetric `H`.
pub fn hutchinson_variance_predict(h: &DMatrix<f64>) -> Result<f64, SensitivityError> {
    if !h.is_square() {
        return Err(SensitivityError::InvalidArgument(format!(
            "matrix must be square, got {}x{}",
            h.nrows(),
            h.ncols()
        )));
    }
    let frob: f64 = h.iter().map(|v| v * v).sum();
    let diag: f64 = h.diagonal().iter().map(|v| v * v).sum();
    Ok(2.0 * (frob - diag))
}
