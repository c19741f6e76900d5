//! The reference desk task: noisy seven-segment digits and a three-block CNN.

use serde::{Deserialize, Serialize};

use crate::model::{
    build_model, desk_cnn_layers, train, Dataset, LayerSpec, Model, ModelError, SyntheticDigits, TrainConfig,
    TrainReport,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskSetup {
    pub data: SyntheticDigits,
    pub train_examples: usize,
    pub test_examples: usize,
    pub data_seed: u64,
    /// Filters of the three conv blocks.
    pub filters: [usize; 3],
    pub batch_norm: bool,
    pub model_seed: u64,
    pub train: TrainConfig,
}

impl Default for DeskSetup {
    /// A short schedule keeps the network away from the interpolating regime,
    /// where per-example gradient norms become extremely heavy-tailed.
    fn default() -> Self {
        Self {
            data: SyntheticDigits::new(10, 8),
            train_examples: 2000,
            test_examples: 2000,
            data_seed: 0,
            filters: [8, 16, 32],
            batch_norm: false,
            model_seed: 0,
            train: TrainConfig {
                epochs: 4,
                ..TrainConfig::default()
            },
        }
    }
}

/// A trained desk model with its data.
#[derive(Clone, Debug)]
pub struct DeskRun {
    pub model: Model,
    pub train: Dataset,
    pub test: Dataset,
    pub report: TrainReport,
}

impl DeskSetup {
    pub fn layers(&self) -> Vec<LayerSpec> {
        desk_cnn_layers(1, self.data.image_size, self.filters, self.data.num_classes, self.batch_norm)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [1, self.data.image_size, self.data.image_size]
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset), ModelError> {
        self.data.split(self.train_examples, self.test_examples, self.data_seed)
    }

    pub fn untrained_model(&self) -> Result<Model, ModelError> {
        build_model(self.layers(), &self.input_shape(), self.data.num_classes, self.model_seed)
    }

    /// Generates the data and trains the full-precision model.
    pub fn run(&self) -> Result<DeskRun, ModelError> {
        let (train_set, test_set) = self.datasets()?;
        let mut model = self.untrained_model()?;
        let report = train(&mut model, &train_set, &self.train)?;
        Ok(DeskRun {
            model,
            train: train_set,
            test: test_set,
            report,
        })
    }
}
