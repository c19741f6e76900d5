//! Subcommand implementations. Each reads its inputs, writes its outputs
//! under the output directory and never touches anything else.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};

use fitq::experiments::{benchmark_estimators, correlate, run_sweep, Correlations, EstimatorBenchmark, SweepResult};
use fitq::model::{evaluate, model_from_json, save_checkpoint, Dataset, Model, TrainReport};
use fitq::quant::{track_ranges, BitConfig, LayerRanges};
use fitq::sensitivity::{
    ef_activation_trace, ef_weight_trace, fit_metric, hutchinson_trace, EstimatorKind, FitReport, SensitivityProfile,
    TraceReport,
};

use crate::config::RunConfig;
use crate::provenance::{Document, Inputs};

/// A validated config plus the digests of everything read so far.
pub struct Ctx {
    pub cfg: RunConfig,
    pub inputs: Inputs,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(cfg: RunConfig, config_text: Option<&str>, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        let mut inputs = Inputs::default();
        if let Some(text) = config_text {
            inputs.add("config-file", text.as_bytes());
        }
        inputs.add("effective-config", toml::to_string(&cfg)?.as_bytes());
        Ok(Self { cfg, inputs, out })
    }

    fn datasets(&mut self) -> Result<(Dataset, Dataset)> {
        if let Some(idx) = self.cfg.idx.clone() {
            for (role, path) in [
                ("idx-train-images", &idx.train_images),
                ("idx-train-labels", &idx.train_labels),
                ("idx-test-images", &idx.test_images),
                ("idx-test-labels", &idx.test_labels),
            ] {
                let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
                self.inputs.add(role, &bytes);
            }
        }
        self.cfg.datasets()
    }

    fn model(&mut self, path: &Path) -> Result<Model> {
        let text = self.inputs.read("model", path)?;
        model_from_json(&text).with_context(|| format!("loading checkpoint {}", path.display()))
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        info!("wrote {}", path.display());
        Ok(path)
    }

    fn write_document<T: Serialize>(&self, name: &str, kind: &str, body: T) -> Result<PathBuf> {
        self.write(name, &Document::new(kind, &self.inputs, body).to_json()?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: String,
    pub report: TrainReport,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn train(mut ctx: Ctx) -> Result<()> {
    let (train_set, test_set) = ctx.datasets()?;
    let mut model = ctx.cfg.untrained_model(&train_set)?;
    let report = fitq::model::train(&mut model, &train_set, &ctx.cfg.setup.train)?;
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    let checkpoint = ctx.out.join("model.json");
    save_checkpoint(&model, &checkpoint)?;
    let bytes = std::fs::read(&checkpoint)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "learning_rate", "loss"])?;
    for r in &report.history {
        w.write_record([r.epoch.to_string(), r.learning_rate.to_string(), r.loss.to_string()])?;
    }
    ctx.write("history.csv", &String::from_utf8(w.into_inner()?)?)?;

    let train_accuracy = evaluate(&model, &train_set)?.accuracy;
    let test_accuracy = evaluate(&model, &test_set)?.accuracy;
    info!(
        "loss {:.4} -> {:.4}, accuracy train {train_accuracy:.4} test {test_accuracy:.4}",
        report.initial_loss,
        report.final_loss()
    );
    let summary = TrainSummary {
        checkpoint: crate::provenance::digest(&bytes),
        report,
        train_accuracy,
        test_accuracy,
    };
    ctx.write_document("train.json", "train-report", summary)?;
    Ok(())
}

pub fn calibrate(mut ctx: Ctx, model: &Path) -> Result<()> {
    let model = ctx.model(model)?;
    let (train_set, _) = ctx.datasets()?;
    let ranges = track_ranges(&model, &train_set, &ctx.cfg.calibration)?;
    for r in &ranges.layers {
        info!(
            "{}: weights [{:.4}, {:.4}], inputs [{:.4}, {:.4}]",
            r.layer, r.weight.min, r.weight.max, r.activation.min, r.activation.max
        );
    }
    ctx.write_document("ranges.json", "ranges", ranges)?;
    Ok(())
}

pub fn trace(mut ctx: Ctx, model: &Path, mode: EstimatorKind) -> Result<()> {
    let model = ctx.model(model)?;
    let (train_set, _) = ctx.datasets()?;
    let cfg = &ctx.cfg.trace;
    let report = match mode {
        EstimatorKind::EfWeight => ef_weight_trace(&model, &train_set, cfg)?,
        EstimatorKind::EfActivation => ef_activation_trace(&model, &train_set, cfg)?,
        EstimatorKind::Hutchinson => hutchinson_trace(&model, &train_set, cfg)?,
    };
    for b in &report.blocks {
        info!("{}: trace {:.6e} after {} iterations", b.name, b.mean, b.iterations);
    }
    info!(
        "{} {} after {} of at most {} iterations",
        mode.name(),
        if report.converged { "converged" } else { "did not converge" },
        report.iterations,
        report.max_iters
    );
    ctx.write(&format!("trace-{}.csv", mode.name()), &report.to_csv())?;
    ctx.write_document(&format!("trace-{}.json", mode.name()), "trace-report", report)?;
    Ok(())
}

pub struct FitInputs<'a> {
    pub weight_traces: &'a Path,
    pub activation_traces: Option<&'a Path>,
    pub ranges: &'a Path,
    pub bit_config: &'a Path,
}

pub fn fit(mut ctx: Ctx, paths: FitInputs<'_>) -> Result<()> {
    let weight: TraceReport = ctx
        .inputs
        .read_document("weight-traces", paths.weight_traces, "trace-report")?;
    let activation: Option<TraceReport> = paths
        .activation_traces
        .map(|p| ctx.inputs.read_document("activation-traces", p, "trace-report"))
        .transpose()?;
    if weight.kind == EstimatorKind::EfActivation {
        bail!("--weight-traces holds activation traces");
    }
    if let Some(a) = &activation {
        if a.kind != EstimatorKind::EfActivation {
            bail!("--activation-traces holds {} traces", a.kind.name());
        }
    }
    for r in std::iter::once(&weight).chain(activation.as_ref()) {
        if r.schema_version != fitq::SCHEMA_VERSION {
            bail!("{} trace report has schema version {}", r.kind.name(), r.schema_version);
        }
    }
    let ranges: LayerRanges = ctx.inputs.read_document("ranges", paths.ranges, "ranges")?;
    let bits = BitConfig::from_json(&ctx.inputs.read("bit-config", paths.bit_config)?)?;
    let profile = SensitivityProfile::new(&weight, activation.as_ref(), &ranges)?;
    let report: FitReport = fit_metric(&profile, &bits, ctx.cfg.sweep.convention)?;
    info!(
        "FIT {:.6e} (weights {:.6e}, activations {:.6e})",
        report.omega, report.weight_omega, report.activation_omega
    );
    ctx.write_document("fit.json", "fit-report", report)?;
    Ok(())
}

pub fn sweep(mut ctx: Ctx, model: &Path, jobs: usize) -> Result<()> {
    let model = ctx.model(model)?;
    let (train_set, test_set) = ctx.datasets()?;
    let result = run_sweep(&model, &train_set, &test_set, &ctx.cfg.sweep, jobs)?;
    info!(
        "{} configurations, {} failed",
        result.rows.len(),
        result.failed()
    );
    ctx.write("sweep.csv", &result.to_csv()?)?;
    ctx.write_document("sweep.json", "sweep", result)?;
    Ok(())
}

pub fn correlate_sweep(mut ctx: Ctx, sweep: &Path) -> Result<()> {
    let result: SweepResult = ctx.inputs.read_document("sweep", sweep, "sweep")?;
    let report: Correlations = correlate(&result)?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    println!("{:<8} {:>8} {:>8}", "score", "test", "train");
    for r in &report.reports {
        println!("{:<8} {:>8} {:>8}", r.heuristic.name(), show(r.rho_test), show(r.rho_train));
    }
    ctx.write("correlations.csv", &report.to_csv()?)?;
    ctx.write_document("correlations.json", "correlations", report)?;
    Ok(())
}

pub fn bench(mut ctx: Ctx, model: &Path) -> Result<()> {
    let model = ctx.model(model)?;
    let (train_set, _) = ctx.datasets()?;
    let b: EstimatorBenchmark = benchmark_estimators(&model, &train_set, &ctx.cfg.bench)?;
    info!(
        "normalized variance EF {:.4} vs Hutchinson {:.4}, ms/iteration {:.2} vs {:.2}, speedup {:.2}",
        b.ef.normalized_variance,
        b.hutchinson.normalized_variance,
        b.ef.iteration_ms,
        b.hutchinson.iteration_ms,
        b.speedup
    );
    ctx.write_document("bench.json", "benchmark", b)?;
    Ok(())
}
