//! Per-iteration variance and cost of the EF and Hutchinson trace estimators.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{check_schema, median, ExperimentError};
use crate::model::{Dataset, Model};
use crate::rng;
use crate::sensitivity::{
    ef_weight_trace, hutchinson_trace, ConvergenceConfig, EstimatorKind, TraceConfig, TraceReport,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub batch_size: usize,
    /// Iterations per run; early stopping is disabled.
    pub iters: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            iters: 200,
            repeats: 3,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.batch_size == 0 || self.iters < 2 {
            return Err(ExperimentError::InvalidArgument(
                "benchmark needs batch_size >= 1 and iters >= 2".into(),
            ));
        }
        if self.repeats < 3 {
            return Err(ExperimentError::InvalidArgument(format!(
                "timing needs at least 3 repeats, got {}",
                self.repeats
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub kind: EstimatorKind,
    /// Mean over runs of the block-averaged `variance / mean^2`.
    pub normalized_variance: f64,
    pub normalized_variance_runs: Vec<f64>,
    /// Median over runs of the mean wall time per iteration.
    pub iteration_ms: f64,
    pub iteration_ms_runs: Vec<f64>,
    /// Per-block trace means of the first run.
    pub traces: Vec<f64>,
}

/// Speedup at a fixed tolerance: the iterations needed scale with the
/// estimator variance, so `s = (var_h * t_h) / (var_ef * t_ef)`.
pub fn relative_speedup(var_h: f64, t_h: f64, var_ef: f64, t_ef: f64) -> f64 {
    (var_h * t_h) / (var_ef * t_ef)
}

/// The speedup formula applied to reference ResNet-18 measurements
/// (batch 32): variances 0.15 (EF) and 1.09 (Hessian), iteration times
/// 47.78 ms and 186.54 ms, reported speedup 27.67 +- 5.40.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpeedup {
    pub var_ef: f64,
    pub var_h: f64,
    pub t_ef_ms: f64,
    pub t_h_ms: f64,
    pub speedup: f64,
    pub reported: f64,
    pub reported_spread: f64,
    pub within_reported: bool,
}

impl ReferenceSpeedup {
    pub fn resnet18() -> Self {
        let (var_ef, var_h, t_ef_ms, t_h_ms) = (0.15, 1.09, 47.78, 186.54);
        let (reported, reported_spread) = (27.67, 5.40);
        let speedup = relative_speedup(var_h, t_h_ms, var_ef, t_ef_ms);
        Self {
            var_ef,
            var_h,
            t_ef_ms,
            t_h_ms,
            speedup,
            reported,
            reported_spread,
            within_reported: (speedup - reported).abs() <= reported_spread,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorBenchmark {
    pub schema_version: u32,
    pub config: BenchConfig,
    pub ef: EstimatorStats,
    pub hutchinson: EstimatorStats,
    /// `relative_speedup` of the two estimators' own fields.
    pub speedup: f64,
    pub reference: ReferenceSpeedup,
}

impl EstimatorBenchmark {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("benchmark serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let b: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Format(e.to_string()))?;
        check_schema(b.schema_version, "benchmark")?;
        Ok(b)
    }
}

fn normalized_variance(report: &TraceReport) -> Result<f64, ExperimentError> {
    report.mean_normalized_variance().ok_or_else(|| {
        ExperimentError::InvalidArgument(format!(
            "{} trace is zero in some block; variance cannot be normalized",
            report.kind.name()
        ))
    })
}

fn measure<F>(kind: EstimatorKind, cfg: &BenchConfig, mut run: F) -> Result<EstimatorStats, ExperimentError>
where
    F: FnMut(&TraceConfig) -> Result<TraceReport, ExperimentError>,
{
    let mut variances = Vec::with_capacity(cfg.repeats);
    let mut times = Vec::with_capacity(cfg.repeats);
    let mut traces = Vec::new();
    for r in 0..cfg.repeats {
        let tc = TraceConfig {
            batch_size: cfg.batch_size,
            max_iters: cfg.iters,
            seed: rng::derive(cfg.seed, r as u64),
            convergence: ConvergenceConfig {
                tolerance: 0.0,
                window: 2,
            },
        };
        let start = Instant::now();
        let report = run(&tc)?;
        times.push(start.elapsed().as_secs_f64() * 1e3 / report.iterations as f64);
        variances.push(normalized_variance(&report)?);
        if r == 0 {
            traces = report.means();
        }
    }
    Ok(EstimatorStats {
        kind,
        normalized_variance: variances.iter().sum::<f64>() / variances.len() as f64,
        normalized_variance_runs: variances,
        iteration_ms: median(&times),
        iteration_ms_runs: times,
        traces,
    })
}

/// Runs both estimators `cfg.repeats` times for exactly `cfg.iters` iterations.
pub fn benchmark_estimators(model: &Model, data: &Dataset, cfg: &BenchConfig) -> Result<EstimatorBenchmark, ExperimentError> {
    cfg.validate()?;
    let ef = measure(EstimatorKind::EfWeight, cfg, |tc| Ok(ef_weight_trace(model, data, tc)?))?;
    let hutchinson = measure(EstimatorKind::Hutchinson, cfg, |tc| Ok(hutchinson_trace(model, data, tc)?))?;
    let speedup = relative_speedup(
        hutchinson.normalized_variance,
        hutchinson.iteration_ms,
        ef.normalized_variance,
        ef.iteration_ms,
    );
    Ok(EstimatorBenchmark {
        schema_version: crate::SCHEMA_VERSION,
        config: cfg.clone(),
        ef,
        hutchinson,
        speedup,
        reference: ReferenceSpeedup::resnet18(),
    })
}
