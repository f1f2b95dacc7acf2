//! Evaluation metrics: Dice, MAE, pooled AUC-ROC / AUC-PR, quadratic
//! weighted kappa, Cohen's kappa, F-1 and confusion matrices.
//!
//! Every function is pure. Probabilities are `f64` in `[0, 1]`, masks are
//! `bool` slices of equal length (flattened `H x W`).

mod agreement;
mod ranking;
pub mod report;

pub use agreement::{
    agreement_stats, cohens_kappa, cohens_kappa_multilabel, confusion_matrix, f1_score, f1_score_multilabel,
    quadratic_weighted_kappa, row_normalized_percent, AgreementStats, KappaWorkspace,
};
pub use ranking::{auc_pr, auc_roc, pr_curve};
pub use report::{GradingScores, LabelScores, MetricReport, MultiLabelScores, ReportParseError, SegScores};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: prediction has {pred} values, ground truth has {gt}")]
    ShapeMismatch { pred: usize, gt: usize },
    #[error("length mismatch: {pred} predictions vs {gt} labels")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("value {value} outside [0, {k})")]
    ValueOutOfRange { value: usize, k: usize },
    #[error("degenerate labels: {0}")]
    DegenerateLabels(&'static str),
    #[error("threshold {0} outside (0, 1)")]
    BadThreshold(f64),
    #[error("chance agreement p_e = 1; kappa is undefined")]
    DegenerateAgreement,
    #[error("empty input")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check_shapes(pred: &[f64], gt: &[bool]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(MetricError::ShapeMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

/// Dice overlap of `pred` binarised at `threshold` against `gt`.
///
/// Both sides empty scores 1.0; exactly one side empty scores 0.0.
pub fn dice(pred: &[f64], gt: &[bool], threshold: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricError::BadThreshold(threshold));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&v, &t) in pred.iter().zip(gt) {
        let pos = v >= threshold;
        p += usize::from(pos);
        g += usize::from(t);
        inter += usize::from(pos && t);
    }
    Ok(dice_from_counts(inter, p, g))
}

pub(crate) fn dice_from_counts(inter: usize, p: usize, g: usize) -> f64 {
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Mean absolute error between probabilities and the binary mask.
pub fn mae(pred: &[f64], gt: &[bool]) -> Result<f64> {
    check_shapes(pred, gt)?;
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Accuracy of integer predictions.
pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}
