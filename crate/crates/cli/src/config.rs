//! Run configuration: one strict TOML file shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fitq::experiments::{BenchConfig, DeskSetup, SweepConfig};
use fitq::model::{build_model, desk_cnn_layers, load_idx, Dataset, Model, Split};
use fitq::quant::CalibrationConfig;
use fitq::sensitivity::TraceConfig;
use fitq::SCHEMA_VERSION;

/// Real images in IDX format, used instead of the synthetic digits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxData {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Synthetic data, model shape and full-precision training.
    pub setup: DeskSetup,
    pub idx: Option<IdxData>,
    pub trace: TraceConfig,
    pub calibration: CalibrationConfig,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            setup: DeskSetup::default(),
            idx: None,
            trace: TraceConfig::default(),
            calibration: CalibrationConfig::default(),
            sweep: SweepConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file. Relative IDX paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let (Some(idx), Some(dir)) = (cfg.idx.as_mut(), path.parent()) {
            for p in [
                &mut idx.train_images,
                &mut idx.train_labels,
                &mut idx.test_images,
                &mut idx.test_labels,
            ] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "schema_version: config declares {}, this build reads {SCHEMA_VERSION}",
                self.schema_version
            );
        }
        self.setup.data.validate().context("setup.data")?;
        self.setup.train.validate().context("setup.train")?;
        if self.setup.train_examples == 0 || self.setup.test_examples == 0 {
            bail!("setup: train_examples and test_examples must be >= 1");
        }
        if self.setup.filters.contains(&0) {
            bail!("setup.filters: every block needs at least one filter");
        }
        if let Some(idx) = &self.idx {
            if idx.num_classes < 2 {
                bail!("idx.num_classes must be >= 2");
            }
        }
        self.trace.validate().context("trace")?;
        if self.calibration.batch_size == 0 || !(0.0..1.0).contains(&self.calibration.ema_decay) {
            bail!("calibration: batch_size must be >= 1 and ema_decay in [0, 1)");
        }
        self.sweep.validate().context("sweep")?;
        self.bench.validate().context("bench")?;
        Ok(())
    }

    /// Train and test splits from IDX files when configured, else synthetic.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.idx {
            Some(idx) => {
                let train = load_idx(&idx.train_images, &idx.train_labels, idx.num_classes, Split::Train)
                    .context("loading IDX training data")?;
                let test = load_idx(&idx.test_images, &idx.test_labels, idx.num_classes, Split::Test)
                    .context("loading IDX test data")?;
                Ok((train, test))
            }
            None => Ok(self.setup.datasets()?),
        }
    }

    /// The untrained three-block CNN sized for `data`.
    pub fn untrained_model(&self, data: &Dataset) -> Result<Model> {
        let shape = data.example_shape();
        if shape.len() != 3 || shape[1] != shape[2] {
            bail!("expected square images [C, S, S], got {shape:?}");
        }
        let layers = desk_cnn_layers(shape[0], shape[1], self.setup.filters, data.num_classes(), self.setup.batch_norm);
        Ok(build_model(layers, shape, data.num_classes(), self.setup.model_seed)?)
    }
}
