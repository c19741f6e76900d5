//! Stopping rule for streams of per-iteration trace estimates.

use serde::{Deserialize, Serialize};

use super::SensitivityError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceConfig {
    /// Relative standard-error threshold; 0 never stops.
    pub tolerance: f64,
    /// Trailing window used for the spread estimate.
    pub window: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            tolerance: 0.01,
            window: 20,
        }
    }
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<(), SensitivityError> {
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(SensitivityError::InvalidArgument(format!(
                "tolerance {} must be finite and >= 0",
                self.tolerance
            )));
        }
        if self.window < 2 {
            return Err(SensitivityError::InvalidArgument(format!(
                "window {} must be >= 2",
                self.window
            )));
        }
        Ok(())
    }
}

/// Per-block running means of a multi-block estimate stream.
///
/// After `k >= window` iterations the standard error of block `l` is taken
/// as `sd(last window estimates) / sqrt(k)`. The stream stops once
/// `se / |mean| < tolerance` for every block. A block whose running mean is
/// exactly zero is compared against the tolerance in absolute terms and the
/// fallback is flagged when its spread is nonzero.
#[derive(Clone, Debug)]
pub struct ConvergenceMonitor {
    config: ConvergenceConfig,
    samples: Vec<Vec<f64>>,
    sums: Vec<f64>,
    absolute_fallback: bool,
    stopped_at: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockDiagnostics {
    pub mean: f64,
    pub standard_error: f64,
    pub relative_error: Option<f64>,
}

impl ConvergenceMonitor {
    pub fn new(blocks: usize, config: ConvergenceConfig) -> Result<Self, SensitivityError> {
        config.validate()?;
        Ok(Self {
            config,
            samples: vec![Vec::new(); blocks],
            sums: vec![0.0; blocks],
            absolute_fallback: false,
            stopped_at: None,
        })
    }

    pub fn iterations(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn absolute_fallback(&self) -> bool {
        self.absolute_fallback
    }

    pub fn stopped_at(&self) -> Option<usize> {
        self.stopped_at
    }

    pub fn diagnostics(&self, block: usize) -> BlockDiagnostics {
        let s = &self.samples[block];
        let k = s.len();
        let mean = if k == 0 { 0.0 } else { self.sums[block] / k as f64 };
        let tail = &s[k.saturating_sub(self.config.window)..];
        let se = sample_variance(tail).sqrt() / (k.max(1) as f64).sqrt();
        BlockDiagnostics {
            mean,
            standard_error: se,
            relative_error: (mean != 0.0).then(|| se / mean.abs()),
        }
    }

    /// Records one estimate per block; returns whether the stream should stop.
    pub fn push(&mut self, estimates: &[f64]) -> Result<bool, SensitivityError> {
        if estimates.len() != self.samples.len() {
            return Err(SensitivityError::InvalidArgument(format!(
                "{} estimates for {} blocks",
                estimates.len(),
                self.samples.len()
            )));
        }
        for ((s, sum), &e) in self.samples.iter_mut().zip(&mut self.sums).zip(estimates) {
            s.push(e);
            *sum += e;
        }
        if self.stopped_at.is_some() {
            return Ok(true);
        }
        let k = self.iterations();
        if k < self.config.window {
            return Ok(false);
        }
        let tol = self.config.tolerance;
        let mut all = true;
        let mut fallback = false;
        for block in 0..self.samples.len() {
            let d = self.diagnostics(block);
            let ok = match d.relative_error {
                Some(rel) => rel < tol,
                None => {
                    if d.standard_error > 0.0 {
                        fallback = true;
                    }
                    d.standard_error < tol
                }
            };
            all &= ok;
        }
        self.absolute_fallback |= fallback;
        if all {
            self.stopped_at = Some(k);
        }
        Ok(all)
    }
}

/// Unbiased sample variance; 0 for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
}
