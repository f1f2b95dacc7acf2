use serde::{Deserialize, Serialize};

use super::TransferError;

fn default_lambda() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    0.5
}

/// Weights of the target-task and adaptation terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            gamma: default_gamma(),
        }
    }
}

impl LossWeights {
    pub fn new(lambda: f64, gamma: f64) -> Self {
        Self { lambda, gamma }
    }

    pub fn validate(&self) -> Result<(), TransferError> {
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TransferError::InvalidConfig(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// `l_s + lambda * l_t + gamma * l_a`.
pub fn total_loss(l_s: f64, l_t: f64, l_a: f64, weights: LossWeights) -> Result<f64, TransferError> {
    for (name, v) in [("L_S", l_s), ("L_T", l_t), ("L_A", l_a)] {
        if !v.is_finite() {
            return Err(TransferError::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(l_s + weights.lambda * l_t + weights.gamma * l_a)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Both adversarial objectives and their gradients with respect to the
/// discriminator logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialLosses {
    /// Mean BCE over all samples, source labelled 1 and target 0.
    pub disc_loss: f64,
    /// Mean BCE over target samples labelled as source.
    pub adapt_loss: f64,
    pub d_disc_source: Vec<f64>,
    pub d_disc_target: Vec<f64>,
    pub d_adapt_target: Vec<f64>,
}

pub fn adversarial_losses(source_logits: &[f64], target_logits: &[f64]) -> AdversarialLosses {
    let total = (source_logits.len() + target_logits.len()) as f64;
    let nt = target_logits.len() as f64;
    // -log s(z) = softplus(-z); -log(1 - s(z)) = softplus(z)
    let disc_loss = (source_logits.iter().map(|&z| softplus(-z)).sum::<f64>()
        + target_logits.iter().map(|&z| softplus(z)).sum::<f64>())
        / total;
    let adapt_loss = target_logits.iter().map(|&z| softplus(-z)).sum::<f64>() / nt;
    AdversarialLosses {
        disc_loss,
        adapt_loss,
        d_disc_source: source_logits.iter().map(|&z| (sigmoid(z) - 1.0) / total).collect(),
        d_disc_target: target_logits.iter().map(|&z| sigmoid(z) / total).collect(),
        d_adapt_target: target_logits.iter().map(|&z| (sigmoid(z) - 1.0) / nt).collect(),
    }
}

/// Per-label positive weight `n / positives`, clamped to `[1, 20]`.
pub fn inverse_prevalence_weights(labels: &[[bool; 8]]) -> Vec<f64> {
    (0..8)
        .map(|d| {
            let pos = labels.iter().filter(|l| l[d]).count();
            if pos == 0 {
                20.0
            } else {
                (labels.len() as f64 / pos as f64).clamp(1.0, 20.0)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_sum_examples() {
        let w = LossWeights::new(1.0, 0.5);
        assert_eq!(total_loss(1.0, 2.0, 4.0, w).unwrap(), 5.0);
        assert_eq!(
            total_loss(0.3, 0.7, 9.0, LossWeights::new(2.0, 0.0)).unwrap(),
            0.3 + 2.0 * 0.7
        );
        assert_eq!(total_loss(0.3, 0.7, 9.0, LossWeights::new(0.0, 0.0)).unwrap(), 0.3);
        assert!(matches!(
            total_loss(f64::NAN, 1.0, 1.0, w),
            Err(TransferError::NonFinite(_))
        ));
        assert!(LossWeights::new(-1.0, 0.0).validate().is_err());
    }

    #[test]
    fn confused_discriminator_scores_ln2() {
        let l = adversarial_losses(&[0.0; 3], &[0.0; 5]);
        assert!((l.disc_loss - 2f64.ln()).abs() < 1e-15);
        assert!((l.adapt_loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_central_differences() {
        let src = [0.4, -1.3, 2.2, 0.05];
        let tgt = [-0.7, 1.1, 0.0, 3.0];
        let l = adversarial_losses(&src, &tgt);
        let h = 1e-6;
        for i in 0..4 {
            let (mut up, mut dn) = (tgt, tgt);
            up[i] += h;
            dn[i] -= h;
            let fd_a =
                (adversarial_losses(&src, &up).adapt_loss - adversarial_losses(&src, &dn).adapt_loss) / (2.0 * h);
            let fd_d = (adversarial_losses(&src, &up).disc_loss - adversarial_losses(&src, &dn).disc_loss) / (2.0 * h);
            assert!((fd_a - l.d_adapt_target[i]).abs() <= 1e-4 * fd_a.abs().max(1e-8));
            assert!((fd_d - l.d_disc_target[i]).abs() <= 1e-4 * fd_d.abs().max(1e-8));
            let (mut up, mut dn) = (src, src);
            up[i] += h;
            dn[i] -= h;
            let fd = (adversarial_losses(&up, &tgt).disc_loss - adversarial_losses(&dn, &tgt).disc_loss) / (2.0 * h);
            assert!((fd - l.d_disc_source[i]).abs() <= 1e-4 * fd.abs().max(1e-8));
        }
    }

    #[test]
    fn prevalence_weights() {
        let mut labels = vec![[false; 8]; 10];
        labels[0][1] = true;
        for l in labels.iter_mut() {
            l[2] = true;
        }
        let w = inverse_prevalence_weights(&labels);
        assert_eq!(w[1], 10.0);
        assert_eq!(w[2], 1.0);
        assert_eq!(w[0], 20.0);
    }
}
