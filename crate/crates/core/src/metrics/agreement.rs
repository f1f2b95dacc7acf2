use serde::{Deserialize, Serialize};

use super::{MetricError, Result};

fn check_lengths<T>(pred: &[T], gt: &[T]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

fn check_range(values: &[usize], k: usize) -> Result<()> {
    match values.iter().find(|&&v| v >= k) {
        Some(&value) => Err(MetricError::ValueOutOfRange { value, k }),
        None => Ok(()),
    }
}

/// Counts `m[g][p]` of samples with ground truth `g` predicted as `p`.
pub fn confusion_matrix(pred: &[usize], gt: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    check_lengths(pred, gt)?;
    check_range(pred, k)?;
    check_range(gt, k)?;
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &g) in pred.iter().zip(gt) {
        m[g][p] += 1;
    }
    Ok(m)
}

/// Row-normalised percentages; rows without samples stay at zero.
pub fn row_normalized_percent(m: &[Vec<u64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            row.iter()
                .map(|&c| {
                    if total == 0 {
                        0.0
                    } else {
                        100.0 * c as f64 / total as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// Observed confusion `o`, quadratic weights `w` and expected counts `e`
/// (outer product of the two rating histograms, scaled to the mass of `o`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaWorkspace {
    pub o: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
}

impl KappaWorkspace {
    pub fn build(pred: &[usize], gt: &[usize], k: usize) -> Result<Self> {
        if k < 2 {
            return Err(MetricError::ValueOutOfRange { value: k, k: 2 });
        }
        let counts = confusion_matrix(pred, gt, k)?;
        if pred.is_empty() {
            return Err(MetricError::Empty);
        }
        let n = pred.len() as f64;
        let o: Vec<Vec<f64>> = counts
            .iter()
            .map(|row| row.iter().map(|&c| c as f64).collect())
            .collect();
        let mut hist_gt = vec![0.0; k];
        let mut hist_pred = vec![0.0; k];
        for (&p, &g) in pred.iter().zip(gt) {
            hist_pred[p] += 1.0;
            hist_gt[g] += 1.0;
        }
        let denom = ((k - 1) * (k - 1)) as f64;
        let w = (0..k)
            .map(|i| (0..k).map(|j| (i as f64 - j as f64).powi(2) / denom).collect())
            .collect();
        let e = hist_gt
            .iter()
            .map(|&a| hist_pred.iter().map(|&b| a * b / n).collect())
            .collect();
        Ok(Self { o, w, e })
    }

    pub fn kappa(&self) -> Result<f64> {
        let weighted = |m: &Vec<Vec<f64>>| -> f64 {
            m.iter()
                .zip(&self.w)
                .flat_map(|(r, wr)| r.iter().zip(wr).map(|(a, b)| a * b))
                .sum()
        };
        let num = weighted(&self.o);
        let den = weighted(&self.e);
        if den == 0.0 {
            return Err(MetricError::DegenerateAgreement);
        }
        Ok(1.0 - num / den)
    }
}

/// Cohen's kappa with quadratic weights over ratings `0..k`.
pub fn quadratic_weighted_kappa(pred: &[usize], gt: &[usize], k: usize) -> Result<f64> {
    KappaWorkspace::build(pred, gt, k)?.kappa()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub p_o: f64,
    pub p_e: f64,
}

/// Observed and chance agreement for nominal labels.
pub fn agreement_stats(pred: &[usize], gt: &[usize]) -> Result<AgreementStats> {
    check_lengths(pred, gt)?;
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = pred.len() as f64;
    let k = pred.iter().chain(gt).max().copied().unwrap_or(0) + 1;
    let mut hp = vec![0usize; k];
    let mut hg = vec![0usize; k];
    let mut agree = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        hp[p] += 1;
        hg[g] += 1;
        agree += usize::from(p == g);
    }
    let p_e = hp.iter().zip(&hg).map(|(&a, &b)| (a as f64 / n) * (b as f64 / n)).sum();
    Ok(AgreementStats {
        p_o: agree as f64 / n,
        p_e,
    })
}

/// `(p_o - p_e) / (1 - p_e)`.
pub fn cohens_kappa(pred: &[usize], gt: &[usize]) -> Result<f64> {
    let AgreementStats { p_o, p_e } = agreement_stats(pred, gt)?;
    if p_e >= 1.0 {
        return Err(MetricError::DegenerateAgreement);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

fn columns(rows: &[Vec<bool>]) -> Result<Vec<Vec<usize>>> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(MetricError::DegenerateLabels("ragged multi-label rows"));
    }
    Ok((0..width)
        .map(|c| rows.iter().map(|r| usize::from(r[c])).collect())
        .collect())
}

/// Multi-label kappa: each label column scored independently, then averaged.
pub fn cohens_kappa_multilabel(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Result<f64> {
    check_lengths(pred, gt)?;
    let (pc, gc) = (columns(pred)?, columns(gt)?);
    if pc.len() != gc.len() || pc.is_empty() {
        return Err(MetricError::LengthMismatch {
            pred: pc.len(),
            gt: gc.len(),
        });
    }
    let mut total = 0.0;
    for (p, g) in pc.iter().zip(&gc) {
        total += cohens_kappa(p, g)?;
    }
    Ok(total / pc.len() as f64)
}

/// Binary F-1; zero when there are no true positives.
pub fn f1_score(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_lengths(pred, gt)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn f1_score_multilabel(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Result<f64> {
    check_lengths(pred, gt)?;
    let (pc, gc) = (columns(pred)?, columns(gt)?);
    if pc.len() != gc.len() || pc.is_empty() {
        return Err(MetricError::LengthMismatch {
            pred: pc.len(),
            gt: gc.len(),
        });
    }
    let mut total = 0.0;
    for (p, g) in pc.iter().zip(&gc) {
        let pb: Vec<bool> = p.iter().map(|&v| v == 1).collect();
        let gb: Vec<bool> = g.iter().map(|&v| v == 1).collect();
        total += f1_score(&pb, &gb)?;
    }
    Ok(total / pc.len() as f64)
}
