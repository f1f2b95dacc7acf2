//! Configuration-driven experiment runner behind the command-line tool:
//! layered TOML configs, one output directory per run with a manifest,
//! SVG figures, and cross-run reports.

mod config;
pub mod figures;
mod manifest;
mod report;
mod tasks;

pub use config::{
    load_config, load_config_text, parse_override, DataConfig, DataSource, ExperimentConfig, GradeSection,
    LoadedConfig, SegSection, SourceKind, Task, TransferSection,
};
pub use manifest::{collect_artifacts, sha256_hex, Artifact, Manifest, MANIFEST_FILE};
pub use report::{compare_runs, comparison_table, load_run, RunSummary};
pub use tasks::{execute, ladder_figure, load_source, run_name, rung_slug, Command};

use std::path::Path;

use crate::data::DataError;
use crate::grading::GradeError;
use crate::metrics::{MetricError, ReportParseError};
use crate::segnet::SegError;
use crate::transfer::TransferError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("incompatible reports: {0}")]
    IncompatibleReports(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Grade(#[from] GradeError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("report: {0}")]
    Report(#[from] ReportParseError),
}

fn seg_code(e: &SegError) -> i32 {
    match e {
        SegError::InvalidConfig(_) => 2,
        SegError::Data(_) | SegError::MissingLabels { .. } => 3,
        _ => 1,
    }
}

impl HarnessError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    /// 2 for configuration problems, 3 for data problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::IncompatibleReports(_) => 2,
            HarnessError::Data(_) | HarnessError::Report(_) => 3,
            HarnessError::Seg(e) => seg_code(e),
            HarnessError::Grade(e) => match e {
                GradeError::InvalidConfig(_) => 2,
                GradeError::Data(_) | GradeError::MissingLabels { .. } => 3,
                GradeError::Seg(s) => seg_code(s),
                _ => 1,
            },
            HarnessError::Transfer(e) => match e {
                TransferError::InvalidConfig(_) => 2,
                TransferError::Data(_) | TransferError::MissingLabels { .. } | TransferError::EmptyDomain(_) => 3,
                TransferError::Seg(s) => seg_code(s),
                _ => 1,
            },
            HarnessError::Io { .. } | HarnessError::Metric(_) => 1,
        }
    }
}
