//! `fitq`: train, calibrate, trace, score, sweep, correlate and benchmark
//! from one config file. Every stage reads and writes files, so a whole
//! study is a replayable shell script.
//!
//! Exit codes: 0 success, 1 invalid input, 2 numerical failure.

mod commands;
mod config;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use fitq::autodiff::AutodiffError;
use fitq::experiments::ExperimentError;
use fitq::model::ModelError;
use fitq::quant::QuantError;
use fitq::sensitivity::{EstimatorKind, SensitivityError};

use commands::{Ctx, FitInputs};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "fitq", version, about = "Fisher-information-trace sensitivity for mixed-precision quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed of the command's stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Relative trace tolerance; 0 runs to --max-iters.
    #[arg(long, global = true)]
    tolerance: Option<f64>,
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    /// Bit widths a sweep samples from [default: 8,6,4,3].
    #[arg(long, global = true, value_delimiter = ',')]
    bits: Option<Vec<u32>>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    EfWeight,
    EfActivation,
    Hutchinson,
}

impl From<Mode> for EstimatorKind {
    fn from(m: Mode) -> Self {
        match m {
            Mode::EfWeight => Self::EfWeight,
            Mode::EfActivation => Self::EfActivation,
            Mode::Hutchinson => Self::Hutchinson,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision model: model.json, history.csv, train.json.
    Train,
    /// Weight and activation ranges of a checkpoint: ranges.json.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Per-layer trace estimates: trace-<mode>.json and .csv.
    Trace {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// FIT of one bit configuration: fit.json.
    Fit {
        #[arg(long)]
        weight_traces: PathBuf,
        /// Omit to score weights only.
        #[arg(long)]
        activation_traces: Option<PathBuf>,
        #[arg(long)]
        ranges: PathBuf,
        /// JSON bit configuration.
        #[arg(long)]
        bit_config: PathBuf,
    },
    /// Score and QAT-fine-tune random bit configurations: sweep.json and .csv.
    Sweep {
        #[arg(long)]
        model: PathBuf,
    },
    /// Rank correlations of a sweep: correlations.json and .csv.
    Correlate {
        #[arg(long)]
        sweep: PathBuf,
    },
    /// Variance and cost of the EF and Hutchinson estimators: bench.json.
    Bench {
        #[arg(long)]
        model: PathBuf,
    },
}

impl Cli {
    fn config(&self) -> Result<(RunConfig, Option<String>)> {
        let (mut cfg, text) = match &self.config {
            Some(path) => (RunConfig::load(path)?, Some(std::fs::read_to_string(path)?)),
            None => (RunConfig::default(), None),
        };
        if let Some(seed) = self.seed {
            match self.command {
                Command::Train => {
                    cfg.setup.model_seed = seed;
                    cfg.setup.train.seed = seed;
                }
                Command::Trace { .. } => cfg.trace.seed = seed,
                Command::Sweep { .. } => cfg.sweep.seed = seed,
                Command::Bench { .. } => cfg.bench.seed = seed,
                _ => {}
            }
        }
        if let Some(tol) = self.tolerance {
            cfg.trace.convergence.tolerance = tol;
            cfg.sweep.trace.convergence.tolerance = tol;
        }
        if let Some(n) = self.max_iters {
            cfg.trace.max_iters = n;
            cfg.sweep.trace.max_iters = n;
            cfg.bench.iters = n;
        }
        if let Some(bits) = &self.bits {
            cfg.sweep.bit_set = bits.clone();
        }
        Ok((cfg, text))
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        anyhow::bail!("--jobs must be >= 1");
    }
    let (cfg, text) = cli.config()?;
    let ctx = Ctx::new(cfg, text.as_deref(), cli.out.clone())?;
    match &cli.command {
        Command::Train => commands::train(ctx),
        Command::Calibrate { model } => commands::calibrate(ctx, model),
        Command::Trace { model, mode } => commands::trace(ctx, model, (*mode).into()),
        Command::Fit {
            weight_traces,
            activation_traces,
            ranges,
            bit_config,
        } => commands::fit(
            ctx,
            FitInputs {
                weight_traces,
                activation_traces: activation_traces.as_deref(),
                ranges,
                bit_config,
            },
        ),
        Command::Sweep { model } => commands::sweep(ctx, model, cli.jobs),
        Command::Correlate { sweep } => commands::correlate_sweep(ctx, sweep),
        Command::Bench { model } => commands::bench(ctx, model),
    }
}

fn is_numerical(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<ExperimentError>().is_some_and(ExperimentError::is_numerical)
            || e.downcast_ref::<SensitivityError>().is_some_and(SensitivityError::is_numerical)
            || e.downcast_ref::<QuantError>().is_some_and(QuantError::is_numerical)
            || e.downcast_ref::<ModelError>().is_some_and(ModelError::is_numerical)
            || e.downcast_ref::<AutodiffError>().is_some_and(AutodiffError::is_numerical)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_numerical(&e) { 2 } else { 1 })
        }
    }
}
