//! Segmentation-to-classification transfer: a pretrained lesion network
//! feeds a multi-disease classifier through per-scale transfer
//! connections, optionally with adversarial domain adaptation.

mod ladder;
mod loss;
mod model;
mod train;

pub use ladder::{run_ladder, run_ladder_with, LadderConfig, LadderResult, RungResult};
pub use loss::{adversarial_losses, inverse_prevalence_weights, total_loss, AdversarialLosses, LossWeights};
pub use model::{
    build_discriminator, build_source_branch, build_target_branch, build_transfer_system, multi_scale_transfer,
    Ablation, Domain, DomainDiscriminator, DomainNorm, TargetBranch, TargetOutput, TransferConfig, TransferSystem,
};
pub use train::{
    evaluate_multidisease, load_transfer_checkpoint, multilabel_scores, pretrain_defaults, pretrain_source,
    save_transfer_checkpoint, train_joint, JointConfig, JointHistory, JointHistoryRow, JointTrainer, StepLosses,
    TargetTrainer,
};

use crate::data::DataError;
use crate::metrics::MetricError;
use crate::nn::archive::ArchiveError;
use crate::segnet::SegError;

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("scale mismatch: {0}")]
    ScaleMismatch(String),
    #[error("empty domain: {0}")]
    EmptyDomain(String),
    #[error("sample {id} has no {what}")]
    MissingLabels { id: String, what: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}
