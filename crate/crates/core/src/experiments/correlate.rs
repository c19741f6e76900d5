//! Spearman rank correlation between heuristic scores and accuracy.

use serde::{Deserialize, Serialize};

use super::{check_schema, ExperimentError, SweepResult, SweepRow};
use crate::sensitivity::Heuristic;

/// Minimum number of paired values for a correlation.
pub const MIN_SAMPLES: usize = 3;

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the average-rank vectors of `xs` and `ys`.
///
/// Returns `Ok(None)` when either input is constant, where the coefficient
/// is undefined.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Option<f64>, ExperimentError> {
    if xs.len() != ys.len() {
        return Err(ExperimentError::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < MIN_SAMPLES {
        return Err(ExperimentError::InvalidArgument(format!(
            "need at least {MIN_SAMPLES} pairs, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(ExperimentError::InvalidArgument("NaN in rank correlation input".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

/// Rank correlation of one heuristic's negated score with accuracy, so that
/// a good sensitivity measure correlates positively.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub heuristic: Heuristic,
    /// `None` when indeterminate (constant scores or accuracies).
    pub rho_test: Option<f64>,
    pub rho_train: Option<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub schema_version: u32,
    /// Rows excluded because their fine-tuning failed.
    pub failed_rows: usize,
    pub reports: Vec<CorrelationReport>,
}

impl Correlations {
    pub fn get(&self, h: Heuristic) -> Option<&CorrelationReport> {
        self.reports.iter().find(|r| r.heuristic == h)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("correlations serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let c: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Format(e.to_string()))?;
        check_schema(c.schema_version, "correlation report")?;
        Ok(c)
    }

    pub fn to_csv(&self) -> Result<String, ExperimentError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["heuristic", "rho_test", "rho_train", "samples"])?;
        let opt = |v: Option<f64>| v.map_or("indeterminate".to_string(), |x| x.to_string());
        for r in &self.reports {
            w.write_record([
                r.heuristic.name().to_string(),
                opt(r.rho_test),
                opt(r.rho_train),
                r.samples.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| ExperimentError::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| ExperimentError::Format(e.to_string()))
    }
}

/// Correlates each heuristic over the completed rows; failed rows are counted and skipped.
pub fn correlate_rows(rows: &[SweepRow], heuristics: &[Heuristic]) -> Result<Correlations, ExperimentError> {
    let done: Vec<&SweepRow> = rows.iter().filter(|r| r.completed()).collect();
    if done.len() < MIN_SAMPLES {
        return Err(ExperimentError::TooFewRows {
            completed: done.len(),
            needed: MIN_SAMPLES,
        });
    }
    let test: Vec<f64> = done.iter().filter_map(|r| r.test_accuracy).collect();
    let train: Vec<f64> = done.iter().filter_map(|r| r.train_accuracy).collect();
    let mut reports = Vec::with_capacity(heuristics.len());
    for &h in heuristics {
        let neg = done
            .iter()
            .map(|r| {
                r.scores.get(&h).map(|s| -s).ok_or_else(|| {
                    ExperimentError::InvalidArgument(format!("row {} has no {} score", r.id, h.name()))
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        reports.push(CorrelationReport {
            heuristic: h,
            rho_test: spearman(&neg, &test)?,
            rho_train: spearman(&neg, &train)?,
            samples: done.len(),
        });
    }
    Ok(Correlations {
        schema_version: crate::SCHEMA_VERSION,
        failed_rows: rows.len() - done.len(),
        reports,
    })
}

pub fn correlate(result: &SweepResult) -> Result<Correlations, ExperimentError> {
    correlate_rows(&result.rows, &result.heuristics)
}
