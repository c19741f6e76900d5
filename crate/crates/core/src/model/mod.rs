//! Small convolutional classifiers: layer stacks, datasets, training and
//! checkpoints.

mod checkpoint;
mod data;
mod idx;
mod layers;
mod train;

use thiserror::Error;

use crate::autodiff::AutodiffError;

pub use checkpoint::{load_checkpoint, model_from_json, model_to_json, save_checkpoint, CHECKPOINT_KIND};
pub use data::{make_synthetic_digits, Dataset, Split, SyntheticDigits};
pub use idx::load_idx;
pub use layers::{
    build_model, desk_cnn_layers, BatchNormState, ForwardPass, LayerKind, LayerSpec, Mode, Model,
    ParameterBlock, BN_EPS, BN_MOMENTUM,
};
pub use train::{
    evaluate, evaluate_quantized, train, train_with, EpochRecord, Evaluation, NoHook,
    OptimizerKind, Schedule, StepHook, TrainConfig, TrainReport,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer `{layer}`: {reason}")]
    InvalidSpec { layer: String, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged in epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ModelError {
    /// True for non-finite values and divergence, as opposed to invalid input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Self::Diverged { .. } => true,
            Self::Autodiff(e) => e.is_numerical(),
            _ => false,
        }
    }
}
