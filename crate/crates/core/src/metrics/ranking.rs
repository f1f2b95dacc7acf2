use super::{MetricError, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(MetricError::ShapeMismatch {
            pred: scores.len(),
            gt: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score; ties keep input order.
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the ROC curve over pooled pixels, via the rank statistic:
/// the probability that a random positive outscores a random negative,
/// ties counting one half.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(MetricError::DegenerateLabels(
            "AUC-ROC needs at least one positive and one negative",
        ));
    }
    let order = order_desc(scores);
    // Walk tie groups from the top; each positive beats every negative
    // strictly below it and half of the negatives tied with it.
    let mut negatives_above = 0usize;
    let mut wins = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        let (mut p, mut n) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == s {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        let below = neg - negatives_above - n;
        wins += p as f64 * (below as f64 + 0.5 * n as f64);
        negatives_above += n;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Precision/recall at each distinct threshold, highest threshold first.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(MetricError::DegenerateLabels("AUC-PR needs at least one positive"));
    }
    let order = order_desc(scores);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(points)
}

/// Area under the precision–recall curve with step-wise interpolation:
/// `sum_k (R_k - R_{k-1}) * P_k` over distinct thresholds.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let curve = pr_curve(scores, labels)?;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (recall, precision) in curve {
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}
