//! Weighted binary cross-entropy plus soft Dice.
//!
//! Values are laid out as `[n, c, plane]`; BCE is averaged over every
//! element, soft Dice is computed per `(sample, channel)` and averaged.

use super::SegError;
use crate::nn::Tensor;

/// Additive smoothing in the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;
/// Probability clamp used by [`seg_loss`].
pub const PROB_EPS: f64 = 1e-7;

/// Layout of a loss input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossShape {
    pub n: usize,
    pub c: usize,
    pub plane: usize,
}

impl LossShape {
    pub fn of(t: &Tensor) -> Self {
        Self {
            n: t.n(),
            c: t.c(),
            plane: t.plane_len(),
        }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.plane
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check(shape: LossShape, pred: usize, gt: usize, weights: &[f64]) -> Result<(), SegError> {
    if pred != shape.len() || gt != shape.len() {
        return Err(SegError::ShapeMismatch(format!(
            "loss expects {} values, got pred {pred} and gt {gt}",
            shape.len()
        )));
    }
    if weights.len() != 1 && weights.len() != shape.c {
        return Err(SegError::ShapeMismatch(format!(
            "{} positive weights for {} channels",
            weights.len(),
            shape.c
        )));
    }
    Ok(())
}

fn weight(weights: &[f64], ch: usize) -> f64 {
    if weights.len() == 1 {
        weights[0]
    } else {
        weights[ch]
    }
}

/// Soft Dice term and `d(mean(1 - dice)) / dp` for one `(sample, channel)`
/// slice, scaled by `scale`.
fn dice_slice(p: &[f64], y: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (&pi, &yi) in p.iter().zip(y) {
        inter += pi * yi;
        sp += pi;
        sy += yi;
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sp + sy + DICE_SMOOTH;
    for (gi, &yi) in grad.iter_mut().zip(y) {
        // d(1 - num/den)/dp_i = -(2 y_i den - num) / den^2
        *gi -= scale * (2.0 * yi * den - num) / (den * den);
    }
    1.0 - num / den
}

/// Loss on probabilities `pred` (clamped to `[eps, 1 - eps]`) and its
/// gradient with respect to `pred`.
pub fn seg_loss(
    pred: &[f64],
    gt: &[f64],
    shape: LossShape,
    pos_weight: &[f64],
    dice_weight: f64,
) -> Result<(f64, Vec<f64>), SegError> {
    check(shape, pred.len(), gt.len(), pos_weight)?;
    let total = shape.len() as f64;
    let mut grad = vec![0.0; pred.len()];
    let mut bce = 0.0;
    let mut clamped = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        let ch = (i / shape.plane) % shape.c;
        let w = weight(pos_weight, ch);
        let raw = pred[i];
        let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        clamped[i] = p;
        let y = gt[i];
        bce -= w * y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        if raw > PROB_EPS && raw < 1.0 - PROB_EPS {
            grad[i] = (-w * y / p + (1.0 - y) / (1.0 - p)) / total;
        }
    }
    let mut loss = bce / total;
    if dice_weight != 0.0 {
        let slices = (shape.n * shape.c) as f64;
        let scale = dice_weight / slices;
        let mut dgrad = vec![0.0; pred.len()];
        let mut dice_sum = 0.0;
        for k in 0..shape.n * shape.c {
            let r = k * shape.plane..(k + 1) * shape.plane;
            dice_sum += dice_slice(&clamped[r.clone()], &gt[r.clone()], scale, &mut dgrad[r]);
        }
        for i in 0..pred.len() {
            if pred[i] > PROB_EPS && pred[i] < 1.0 - PROB_EPS {
                grad[i] += dgrad[i];
            }
        }
        loss += dice_weight * dice_sum / slices;
    }
    Ok((loss, grad))
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Same loss evaluated from logits (numerically stable, no clamping) and
/// its gradient with respect to the logits. Used for training.
pub fn seg_loss_logits(
    logits: &Tensor,
    target: &Tensor,
    pos_weight: &[f64],
    dice_weight: f64,
) -> Result<(f64, Tensor), SegError> {
    if logits.dims() != target.dims() {
        return Err(SegError::ShapeMismatch(format!(
            "logits {:?} vs target {:?}",
            logits.dims(),
            target.dims()
        )));
    }
    let shape = LossShape::of(logits);
    check(shape, logits.len(), target.len(), pos_weight)?;
    let total = shape.len() as f64;
    let z: Vec<f64> = logits.data().iter().map(|&v| f64::from(v)).collect();
    let y: Vec<f64> = target.data().iter().map(|&v| f64::from(v)).collect();
    let p: Vec<f64> = z.iter().map(|&v| sigmoid64(v)).collect();
    let mut grad = vec![0.0; z.len()];
    let mut bce = 0.0;
    for i in 0..z.len() {
        let ch = (i / shape.plane) % shape.c;
        let w = weight(pos_weight, ch);
        // -[w y log s(z) + (1 - y) log(1 - s(z))]
        bce += w * y[i] * softplus(-z[i]) + (1.0 - y[i]) * softplus(z[i]);
        grad[i] = (p[i] * (w * y[i] + 1.0 - y[i]) - w * y[i]) / total;
    }
    let mut loss = bce / total;
    if dice_weight != 0.0 {
        let slices = (shape.n * shape.c) as f64;
        let scale = dice_weight / slices;
        let mut dp = vec![0.0; z.len()];
        let mut dice_sum = 0.0;
        for k in 0..shape.n * shape.c {
            let r = k * shape.plane..(k + 1) * shape.plane;
            dice_sum += dice_slice(&p[r.clone()], &y[r.clone()], scale, &mut dp[r]);
        }
        for i in 0..z.len() {
            grad[i] += dp[i] * p[i] * (1.0 - p[i]);
        }
        loss += dice_weight * dice_sum / slices;
    }
    let grad = Tensor::from_vec(logits.dims(), grad.into_iter().map(|v| v as f32).collect());
    Ok((loss, grad))
}

/// `negatives / positives` clamped to `[1, 100]`; 1 when there are no
/// positives.
pub fn auto_pos_weight(positives: usize, total: usize) -> f64 {
    if positives == 0 {
        return 1.0;
    }
    ((total - positives) as f64 / positives as f64).clamp(1.0, 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(n: usize, c: usize, plane: usize) -> LossShape {
        LossShape { n, c, plane }
    }

    fn instance() -> (Vec<f64>, Vec<f64>) {
        let pred: Vec<f64> = (0..32).map(|i| 0.05 + 0.9 * ((i * 7 % 17) as f64 / 16.0)).collect();
        let gt: Vec<f64> = (0..32).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        (pred, gt)
    }

    #[test]
    fn saturated_prediction_has_near_zero_loss() {
        let gt: Vec<f64> = (0..16).map(|i| f64::from(u8::from(i < 5))).collect();
        let (loss, _) = seg_loss(&gt, &gt, shape(1, 1, 16), &[3.0], 1.0).unwrap();
        assert!(loss < 1e-5, "{loss}");
    }

    #[test]
    fn reduces_to_plain_bce() {
        let (pred, gt) = instance();
        let (loss, _) = seg_loss(&pred, &gt, shape(2, 1, 16), &[1.0], 0.0).unwrap();
        let bce: f64 = pred
            .iter()
            .zip(&gt)
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / 32.0;
        assert!((loss - bce).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (pred, gt) = instance();
        let s = shape(2, 1, 16);
        let (_, grad) = seg_loss(&pred, &gt, s, &[2.5], 1.0).unwrap();
        let h = 1e-6;
        for i in 0..pred.len() {
            let mut up = pred.clone();
            let mut dn = pred.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (seg_loss(&up, &gt, s, &[2.5], 1.0).unwrap().0 - seg_loss(&dn, &gt, s, &[2.5], 1.0).unwrap().0)
                / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-12);
            assert!(rel <= 1e-4, "element {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn logits_version_agrees_with_probabilities() {
        let (pred, gt) = instance();
        let z: Vec<f32> = pred.iter().map(|&p| (p / (1.0 - p)).ln() as f32).collect();
        let logits = Tensor::from_vec([2, 2, 2, 4], z.clone());
        let target = Tensor::from_vec([2, 2, 2, 4], gt.iter().map(|&v| v as f32).collect());
        let (lz, gz) = seg_loss_logits(&logits, &target, &[2.0, 4.0], 0.7).unwrap();
        let p64: Vec<f64> = z.iter().map(|&v| sigmoid64(f64::from(v))).collect();
        let (lp, gp) = seg_loss(&p64, &gt, shape(2, 2, 8), &[2.0, 4.0], 0.7).unwrap();
        assert!((lz - lp).abs() < 1e-9, "{lz} vs {lp}");
        for i in 0..32 {
            let chain = gp[i] * p64[i] * (1.0 - p64[i]);
            assert!((f64::from(gz.data()[i]) - chain).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_errors_and_pos_weight() {
        assert!(seg_loss(&[0.5; 4], &[0.0; 3], shape(1, 1, 4), &[1.0], 1.0).is_err());
        assert!(seg_loss(&[0.5; 4], &[0.0; 4], shape(1, 2, 2), &[1.0; 3], 1.0).is_err());
        assert_eq!(auto_pos_weight(0, 10), 1.0);
        assert_eq!(auto_pos_weight(1, 10), 9.0);
        assert_eq!(auto_pos_weight(1, 1000), 100.0);
        assert_eq!(auto_pos_weight(9, 10), 1.0);
    }
}
