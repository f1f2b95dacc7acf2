//! Five-class severity grading: plain or lesion-fused classifiers with
//! optional laser-mark / membrane heads, training, evaluation and class
//! activation maps.

mod cam;
mod model;
mod train;

pub use cam::{cam_from_features, class_activation_map, CamMap};
pub use model::{
    argmax_grade, build_grading_model, fuse_lesion_inputs, Backbone, FusedInputs, Fusion, GradeModel, GradeModelConfig,
    GradeOutput, GradePrediction,
};
pub use train::{
    confusion_percent_to_tsv, confusion_to_tsv, evaluate_grading, grade_loss, grading_scores, load_grading_checkpoint,
    predictions_to_tsv, save_grading_checkpoint, train_grading, GradeHistory, GradeHistoryRow, GradeLoss,
    GradeTrainConfig,
};

use crate::data::DataError;
use crate::metrics::MetricError;
use crate::nn::archive::ArchiveError;
use crate::segnet::SegError;

#[derive(Debug, thiserror::Error)]
pub enum GradeError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sample {id} has no {what}")]
    MissingLabels { id: String, what: String },
    #[error("unsupported architecture: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}
