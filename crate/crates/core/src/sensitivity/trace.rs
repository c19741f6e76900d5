//! Trace-estimate reports.

use serde::{Deserialize, Serialize};

use super::{ConvergenceConfig, ConvergenceMonitor, SensitivityError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    EfWeight,
    EfActivation,
    Hutchinson,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::EfWeight => "ef-weight",
            Self::EfActivation => "ef-activation",
            Self::Hutchinson => "hutchinson",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Self::EfWeight => 0x4546_5754,
            Self::EfActivation => 0x4546_4154,
            Self::Hutchinson => 0x4855_5443,
        }
    }
}

/// Whether block values are raw traces or divided by the block's element count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Raw,
    PerParameter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub name: String,
    /// Running mean of the per-iteration estimates.
    pub mean: f64,
    /// Sample variance of the per-iteration estimates.
    pub variance: f64,
    pub iterations: usize,
    /// Elements covered: n(l) for weights, per-example activation size for sites.
    pub elements: usize,
    pub samples: Vec<f64>,
}

impl BlockTrace {
    /// Variance divided by the squared mean; `None` when the mean is zero.
    pub fn normalized_variance(&self) -> Option<f64> {
        (self.mean != 0.0).then(|| self.variance / (self.mean * self.mean))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub schema_version: u32,
    pub kind: EstimatorKind,
    pub normalization: Normalization,
    pub batch_size: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub window: usize,
    pub max_iters: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Set when a zero running mean forced the absolute-tolerance rule.
    pub absolute_fallback: bool,
    pub blocks: Vec<BlockTrace>,
}

/// Estimator settings shared by the EF and Hutchinson model estimators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceConfig {
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub convergence: ConvergenceConfig,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_iters: 500,
            seed: 0,
            convergence: ConvergenceConfig::default(),
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<(), SensitivityError> {
        if self.batch_size == 0 || self.max_iters == 0 {
            return Err(SensitivityError::InvalidArgument(
                "batch_size and max_iters must be >= 1".into(),
            ));
        }
        self.convergence.validate()
    }

    pub(crate) fn stream_seed(&self, kind: EstimatorKind) -> u64 {
        crate::rng::derive(self.seed, kind.stream())
    }
}

impl TraceReport {
    pub(crate) fn from_monitor(
        kind: EstimatorKind,
        cfg: &TraceConfig,
        batch_size: usize,
        names: &[String],
        elements: &[usize],
        monitor: &ConvergenceMonitor,
    ) -> Self {
        let blocks = names
            .iter()
            .zip(elements)
            .enumerate()
            .map(|(i, (name, &elements))| {
                let samples = monitor.samples()[i].clone();
                BlockTrace {
                    name: name.clone(),
                    mean: monitor.diagnostics(i).mean,
                    variance: super::monitor::sample_variance(&samples),
                    iterations: samples.len(),
                    elements,
                    samples,
                }
            })
            .collect();
        Self {
            schema_version: crate::SCHEMA_VERSION,
            kind,
            normalization: Normalization::Raw,
            batch_size,
            seed: cfg.seed,
            tolerance: cfg.convergence.tolerance,
            window: cfg.convergence.window,
            max_iters: cfg.max_iters,
            iterations: monitor.iterations(),
            converged: monitor.stopped_at().is_some(),
            absolute_fallback: monitor.absolute_fallback(),
            blocks,
        }
    }

    pub fn means(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.mean).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.name.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&BlockTrace> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Block values divided by their element counts.
    pub fn per_parameter(&self) -> Self {
        if self.normalization == Normalization::PerParameter {
            return self.clone();
        }
        let mut out = self.clone();
        out.normalization = Normalization::PerParameter;
        for b in &mut out.blocks {
            let n = b.elements.max(1) as f64;
            b.mean /= n;
            b.variance /= n * n;
            b.samples.iter_mut().for_each(|s| *s /= n);
        }
        out
    }

    /// Mean over blocks of `variance / mean^2`, skipping zero-mean blocks.
    pub fn mean_normalized_variance(&self) -> Option<f64> {
        let vals: Vec<f64> = self.blocks.iter().filter_map(BlockTrace::normalized_variance).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, SensitivityError> {
        let r: Self = serde_json::from_str(text).map_err(|e| SensitivityError::Format(e.to_string()))?;
        if r.schema_version != crate::SCHEMA_VERSION {
            return Err(SensitivityError::Format(format!(
                "schema version {} (expected {})",
                r.schema_version,
                crate::SCHEMA_VERSION
            )));
        }
        Ok(r)
    }

    /// One row per block.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["block", "kind", "normalization", "mean", "variance", "iterations", "elements"])
            .expect("in-memory write");
        for b in &self.blocks {
            w.write_record([
                b.name.clone(),
                self.kind.name().to_string(),
                format!("{:?}", self.normalization).to_lowercase(),
                b.mean.to_string(),
                b.variance.to_string(),
                b.iterations.to_string(),
                b.elements.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}
