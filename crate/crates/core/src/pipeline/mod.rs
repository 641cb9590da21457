//! Training, sliding-window inference, slice export and case discovery.

mod config;
mod data;
mod export;
mod infer;
mod optim;
mod preprocess;
mod train;

pub use config::TrainConfig;
pub use data::{case_id, discover_cases, load_case, load_mask, save_mask};
pub use export::{
    encode_ppm, export_slices, labelled_slices, render_slice, SliceAxis, COLOR_ED, COLOR_ET,
    COLOR_NCR,
};
pub use infer::{
    argmax_classes, classes_to_mask, sliding_window_infer, volume_tensor, window_starts,
    InferenceOutput, PatchWeighting,
};
pub use optim::{poly_lr, Adam};
pub use preprocess::{
    crop_mask, crop_origin, crop_volume, nonzero_bbox, normalize_intensities, preprocess,
    Preprocessed,
};
pub use train::{
    foreground_dice, model_for, prepare_case, split_indices, train, training_labels, Case,
    PreparedCase, StepLog, TrainOutcome, LOSS_LOG_HEADER,
};

use crate::evaluation::EvalError;
use crate::losses::LossError;
use crate::model::{CheckpointError, ModelError};
use crate::tensor::TensorError;
use crate::volume_io::VolumeError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("no training cases")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, PipelineError>;
