//! Lesion segmentation networks: plain, six-channel, attention-gated and
//! densely connected U-Nets, their loss, training loop and evaluation.

pub mod loss;
mod model;
mod train;

pub use loss::{auto_pos_weight, seg_loss, seg_loss_logits, LossShape};
pub use model::{
    build_segmentation_model, AttentionGate, DenseEncoder, EncoderOutput, SegModel, SegModelConfig, SegOutput,
    SegVariant,
};
pub(crate) use train::{channel_pos_weights, gather};
pub use train::{
    evaluate_segmentation, export_masks, load_checkpoint, prepare_inputs, save_checkpoint, train_segmentation, History,
    HistoryRow, LesionTarget, TrainConfig,
};

use crate::data::DataError;
use crate::metrics::MetricError;
use crate::nn::archive::ArchiveError;

#[derive(Debug, thiserror::Error)]
pub enum SegError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sample {id} has no {what}")]
    MissingLabels { id: String, what: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}
