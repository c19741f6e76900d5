//! Random mixed-precision sweeps: score every sampled configuration from the
//! full-precision model, then fine-tune it with QAT from the same checkpoint.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_schema, ExperimentError};
use crate::model::{Dataset, Model, OptimizerKind, Schedule, TrainConfig};
use crate::quant::{
    qat_finetune, track_ranges, BitConfig, CalibrationConfig, LayerRanges, NoiseConvention, QatConfig,
    DEFAULT_BIT_SET,
};
use crate::rng;
use crate::sensitivity::{
    ef_activation_trace, ef_weight_trace, heuristic_score, Heuristic, SensitivityProfile, TraceConfig, TraceReport,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub configs: usize,
    pub bit_set: Vec<u32>,
    pub seed: u64,
    pub qat: QatConfig,
    pub trace: TraceConfig,
    pub calibration: CalibrationConfig,
    pub convention: NoiseConvention,
}

impl Default for SweepConfig {
    /// Desk defaults: 24 configurations and a two-epoch QAT fine-tune at a
    /// tenth of the full-precision learning rate.
    fn default() -> Self {
        Self {
            configs: 24,
            bit_set: DEFAULT_BIT_SET.to_vec(),
            seed: 0,
            qat: QatConfig {
                train: TrainConfig {
                    epochs: 2,
                    learning_rate: 0.001,
                    schedule: Schedule::Cosine,
                    batch_size: 32,
                    seed: 0,
                    optimizer: OptimizerKind::Adam,
                },
                ema_decay: 0.9,
            },
            trace: TraceConfig::default(),
            calibration: CalibrationConfig::default(),
            convention: NoiseConvention::DropTwelfth,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.configs < 3 {
            return Err(ExperimentError::InvalidArgument(format!(
                "a sweep needs at least 3 configs, got {}",
                self.configs
            )));
        }
        if self.bit_set.is_empty() {
            return Err(ExperimentError::InvalidArgument("bit set is empty".into()));
        }
        self.qat.train.validate()?;
        self.trace.validate()?;
        Ok(())
    }
}

/// Everything measured on the full-precision model before any QAT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub weight_traces: TraceReport,
    pub activation_traces: TraceReport,
    pub ranges: LayerRanges,
    pub signals: SensitivityProfile,
}

/// EF weight and activation traces plus calibration ranges on `data`.
pub fn profile_model(
    model: &Model,
    data: &Dataset,
    trace: &TraceConfig,
    calibration: &CalibrationConfig,
) -> Result<ModelProfile, ExperimentError> {
    let weight_traces = ef_weight_trace(model, data, trace)?;
    let activation_traces = ef_activation_trace(model, data, trace)?;
    let ranges = track_ranges(model, data, calibration)?;
    let signals = SensitivityProfile::new(&weight_traces, Some(&activation_traces), &ranges)?.with_gammas(model);
    Ok(ModelProfile {
        weight_traces,
        activation_traces,
        ranges,
        signals,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub id: usize,
    /// Seed the configuration was sampled with.
    pub seed: u64,
    pub bits: BitConfig,
    pub scores: BTreeMap<Heuristic, f64>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Set when fine-tuning failed; such rows carry no accuracies.
    pub failure: Option<String>,
    pub wall_time_ms: f64,
}

impl SweepRow {
    pub fn completed(&self) -> bool {
        self.failure.is_none() && self.train_accuracy.is_some() && self.test_accuracy.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub schema_version: u32,
    pub config: SweepConfig,
    pub heuristics: Vec<Heuristic>,
    pub profile: ModelProfile,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| !r.completed()).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep results serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let r: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Format(e.to_string()))?;
        check_schema(r.schema_version, "sweep result")?;
        Ok(r)
    }

    /// One row per configuration: id, seed, flattened per-layer bits, every
    /// heuristic score, accuracies, status and wall time.
    pub fn to_csv(&self) -> Result<String, ExperimentError> {
        let names = self.profile.signals.names();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string(), "seed".to_string()];
        for n in &names {
            header.push(format!("w_{n}"));
            header.push(format!("a_{n}"));
        }
        header.extend(self.heuristics.iter().map(|h| h.name().to_string()));
        header.extend(["train_accuracy", "test_accuracy", "status", "wall_time_ms"].map(String::from));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.rows {
            let mut rec = vec![row.id.to_string(), row.seed.to_string()];
            rec.extend(row.bits.key().iter().map(u32::to_string));
            rec.extend(self.heuristics.iter().map(|h| row.scores[h].to_string()));
            rec.push(opt(row.train_accuracy));
            rec.push(opt(row.test_accuracy));
            rec.push(row.failure.as_deref().map_or("ok".into(), |f| format!("failed: {f}")));
            rec.push(format!("{:.3}", row.wall_time_ms));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| ExperimentError::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| ExperimentError::Format(e.to_string()))
    }
}

/// Profiles `model` on `train`, then runs [`run_sweep_with_profile`].
pub fn run_sweep(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &SweepConfig,
    jobs: usize,
) -> Result<SweepResult, ExperimentError> {
    cfg.validate()?;
    let trace = TraceConfig {
        seed: rng::derive(cfg.seed, 0),
        ..cfg.trace.clone()
    };
    let profile = profile_model(model, train, &trace, &cfg.calibration)?;
    run_sweep_with_profile(model, train, test, cfg, profile, jobs)
}

/// Samples `cfg.configs` bit configurations, scores each with every
/// available heuristic and QAT-fine-tunes a copy of `model` for each.
///
/// Rows run on up to `jobs` worker threads; results do not depend on `jobs`.
/// A row whose fine-tuning fails is kept with its failure reason.
pub fn run_sweep_with_profile(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &SweepConfig,
    profile: ModelProfile,
    jobs: usize,
) -> Result<SweepResult, ExperimentError> {
    cfg.validate()?;
    if jobs == 0 {
        return Err(ExperimentError::InvalidArgument("jobs must be >= 1".into()));
    }
    let names = model.block_names();
    if profile.signals.names() != names {
        return Err(ExperimentError::InvalidArgument("profile does not match the model's layers".into()));
    }
    let heuristics = Heuristic::available(&profile.signals);
    let mut planned = Vec::with_capacity(cfg.configs);
    for id in 0..cfg.configs {
        let seed = rng::derive(cfg.seed, 1 + id as u64);
        let bits = BitConfig::sample(&names, &cfg.bit_set, seed)?;
        let scores = heuristics
            .iter()
            .map(|&h| Ok((h, heuristic_score(h, &profile.signals, &bits, cfg.convention)?)))
            .collect::<Result<BTreeMap<_, _>, ExperimentError>>()?;
        planned.push((id, seed, bits, scores));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| ExperimentError::InvalidArgument(e.to_string()))?;
    let rows = pool.install(|| {
        planned
            .into_par_iter()
            .map(|(id, seed, bits, scores)| {
                let start = Instant::now();
                let outcome = qat_finetune(model, &bits, &profile.ranges, train, test, &cfg.qat);
                let wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
                let (train_accuracy, test_accuracy, failure) = match outcome {
                    Ok(o) => (Some(o.train_accuracy), Some(o.test_accuracy), None),
                    Err(e) => (None, None, Some(e.to_string())),
                };
                SweepRow {
                    id,
                    seed,
                    bits,
                    scores,
                    train_accuracy,
                    test_accuracy,
                    failure,
                    wall_time_ms,
                }
            })
            .collect()
    });
    Ok(SweepResult {
        schema_version: crate::SCHEMA_VERSION,
        config: cfg.clone(),
        heuristics,
        profile,
        rows,
    })
}
