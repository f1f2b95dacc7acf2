//! Brute-force reference implementations. Written from the definitions,
//! deliberately sharing no code with the library.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

pub fn dice(pred: &[f64], gt: &[bool], thr: f64) -> f64 {
    let p: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i] >= thr).collect();
    let g: HashSet<usize> = (0..gt.len()).filter(|&i| gt[i]).collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    2.0 * p.intersection(&g).count() as f64 / (p.len() + g.len()) as f64
}

pub fn mae(pred: &[f64], gt: &[bool]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        let t = if gt[i] { 1.0 } else { 0.0 };
        s += if pred[i] > t { pred[i] - t } else { t - pred[i] };
    }
    s / pred.len() as f64
}

/// Pairwise Mann-Whitney count.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

/// Step-wise area: recompute TP/FP from scratch at every distinct threshold.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for t in thresholds {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for i in 0..scores.len() {
            if scores[i] >= t {
                if labels[i] {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let recall = tp / pos;
        area += (recall - prev_recall) * (tp / (tp + fp));
        prev_recall = recall;
    }
    area
}

/// Pair form: one minus observed squared disagreement over the squared
/// disagreement of all cross pairs.
pub fn quadratic_weighted_kappa(pred: &[usize], gt: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let sq = |a: usize, b: usize| (a as f64 - b as f64).powi(2);
    let observed: f64 = pred.iter().zip(gt).map(|(&p, &g)| sq(p, g)).sum();
    let mut expected = 0.0;
    for &p in pred {
        for &g in gt {
            expected += sq(p, g);
        }
    }
    1.0 - observed / (expected / n)
}

pub fn cohens_kappa(pred: &[usize], gt: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let p_o = pred.iter().zip(gt).filter(|(a, b)| a == b).count() as f64 / n;
    let mut chance = 0.0;
    for &p in pred {
        for &g in gt {
            if p == g {
                chance += 1.0;
            }
        }
    }
    let p_e = chance / (n * n);
    (p_o - p_e) / (1.0 - p_e)
}

pub fn f1_score(pred: &[bool], gt: &[bool]) -> f64 {
    let tp = (0..pred.len()).filter(|&i| pred[i] && gt[i]).count() as f64;
    let fp = (0..pred.len()).filter(|&i| pred[i] && !gt[i]).count() as f64;
    let fnn = (0..pred.len()).filter(|&i| !pred[i] && gt[i]).count() as f64;
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fnn)
    }
}

/// Random mask instance up to 10x10; scores are drawn from a coarse grid
/// so ties are common.
pub fn mask_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let h = rng.gen_range(1..=10);
    let w = rng.gen_range(1..=10);
    let n = h * w;
    let density = rng.gen_range(0.0..1.0);
    let gt: Vec<bool> = (0..n).map(|_| rng.gen_bool(density)).collect();
    let coarse = rng.gen_bool(0.5);
    let pred = (0..n)
        .map(|_| {
            if coarse {
                f64::from(rng.gen_range(0..=10u8)) / 10.0
            } else {
                rng.gen_range(0.0..1.0)
            }
        })
        .collect();
    (pred, gt)
}

pub fn rating_instance(rng: &mut ChaCha8Rng, k: usize) -> (Vec<usize>, Vec<usize>) {
    let n = rng.gen_range(2..=50);
    let pred = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let gt = (0..n).map(|_| rng.gen_range(0..k)).collect();
    (pred, gt)
}

pub struct OracleOutcome {
    pub checked: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

/// Runs every metric against its oracle on `instances` random cases.
pub fn run_metric_oracles(instances: usize, seed: u64) -> OracleOutcome {
    use retinakit::metrics as m;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OracleOutcome {
        checked: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    let mut cmp = |name: &str, i: usize, got: f64, want: f64| {
        let err = (got - want).abs();
        out.checked += 1;
        out.worst = out.worst.max(err);
        if err > 1e-9 || err.is_nan() {
            out.failures.push(format!("{name} case {i}: {got} vs {want}"));
        }
    };
    for i in 0..instances {
        let (pred, gt) = mask_instance(&mut rng);
        let thr = rng.gen_range(0.05..0.95);
        cmp("dice", i, m::dice(&pred, &gt, thr).unwrap(), dice(&pred, &gt, thr));
        cmp("mae", i, m::mae(&pred, &gt).unwrap(), mae(&pred, &gt));
        let pos = gt.iter().filter(|&&g| g).count();
        if pos > 0 && pos < gt.len() {
            cmp("auc_roc", i, m::auc_roc(&pred, &gt).unwrap(), auc_roc(&pred, &gt));
        }
        if pos > 0 {
            cmp("auc_pr", i, m::auc_pr(&pred, &gt).unwrap(), auc_pr(&pred, &gt));
        }
        let binary: Vec<bool> = pred.iter().map(|&p| p >= thr).collect();
        cmp(
            "f1_score",
            i,
            m::f1_score(&binary, &gt).unwrap(),
            f1_score(&binary, &gt),
        );

        let k = rng.gen_range(2..=5);
        let (rp, rg) = rating_instance(&mut rng, k);
        if let Ok(q) = m::quadratic_weighted_kappa(&rp, &rg, k) {
            cmp("quadratic_weighted_kappa", i, q, quadratic_weighted_kappa(&rp, &rg));
        } else {
            // only a zero expected disagreement may be rejected
            let all_same = rp.iter().chain(&rg).all(|&v| v == rp[0]);
            if !all_same {
                cmp("quadratic_weighted_kappa rejected", i, f64::NAN, 0.0);
            }
        }
        if let Ok(c) = m::cohens_kappa(&rp, &rg) {
            cmp("cohens_kappa", i, c, cohens_kappa(&rp, &rg));
        }
    }
    out
}
