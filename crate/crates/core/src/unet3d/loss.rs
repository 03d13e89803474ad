//! Cross-entropy plus dice loss restricted to annotated voxels.
//!
//! Unannotated voxels are zeroed in both prediction and target before the
//! dice term and skipped by the cross-entropy mean, so they contribute
//! nothing to the loss or its gradient.

use crate::annotation::{LABEL_BG, LABEL_FG, LABEL_NONE};
use crate::{Error, Result};

/// Additive smoothing in the dice ratio `(2I + s) / (P + T + s)`.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub cross_entropy: f64,
    pub dice_loss: f64,
    /// Gradient of `value` with respect to each input element.
    pub grad: Vec<f64>,
}

struct DiceParts {
    intersection: f64,
    pred_sum: f64,
    target_sum: f64,
}

impl DiceParts {
    fn new(probs: impl Iterator<Item = f64>, labels: &[u8]) -> Self {
        let mut d = DiceParts {
            intersection: 0.0,
            pred_sum: 0.0,
            target_sum: 0.0,
        };
        for (p, &l) in probs.zip(labels) {
            if l == LABEL_NONE {
                continue;
            }
            let t = f64::from(l == LABEL_FG);
            d.intersection += p * t;
            d.pred_sum += p;
            d.target_sum += t;
        }
        d
    }

    fn denominator(&self) -> f64 {
        self.pred_sum + self.target_sum + DICE_SMOOTH
    }

    fn loss(&self) -> f64 {
        1.0 - (2.0 * self.intersection + DICE_SMOOTH) / self.denominator()
    }

    /// d(dice loss)/dp for an annotated voxel with target `t`.
    fn grad(&self, t: f64) -> f64 {
        let den = self.denominator();
        -(2.0 * t * den - (2.0 * self.intersection + DICE_SMOOTH)) / (den * den)
    }
}

fn check(len: usize, labels: &[u8]) -> Result<usize> {
    if len != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![labels.len()],
            found: vec![len],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > LABEL_FG) {
        return Err(Error::Malformed(format!("label value {bad}")));
    }
    let annotated = labels.iter().filter(|&&l| l != LABEL_NONE).count();
    if annotated == 0 {
        return Err(Error::Empty("no annotated voxels in loss input"));
    }
    Ok(annotated)
}

/// Masked loss on foreground probabilities.
///
/// `labels` uses the annotation codes: 0 unannotated, 1 background, 2 foreground.
pub fn masked_loss(probs: &[f64], labels: &[u8]) -> Result<LossOutput> {
    let n = check(probs.len(), labels)? as f64;
    let dice = DiceParts::new(probs.iter().copied(), labels);
    let mut ce = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for ((g, &p), &l) in grad.iter_mut().zip(probs).zip(labels) {
        match l {
            LABEL_FG => {
                ce -= p.max(f64::MIN_POSITIVE).ln();
                *g = -1.0 / (n * p) + dice.grad(1.0);
            }
            LABEL_BG => {
                ce -= (1.0 - p).max(f64::MIN_POSITIVE).ln();
                *g = 1.0 / (n * (1.0 - p)) + dice.grad(0.0);
            }
            _ => {}
        }
    }
    let ce = ce / n;
    let dice_loss = dice.loss();
    Ok(LossOutput {
        value: ce + dice_loss,
        cross_entropy: ce,
        dice_loss,
        grad,
    })
}

/// The same loss evaluated from logit differences `z1 - z0`, with the
/// gradient taken with respect to those differences.
///
/// Cross-entropy is computed as a softplus, so saturated logits stay finite.
pub fn masked_loss_logits(diff: &[f64], labels: &[u8]) -> Result<LossOutput> {
    let n = check(diff.len(), labels)? as f64;
    let probs: Vec<f64> = diff.iter().map(|&d| logistic(d)).collect();
    let dice = DiceParts::new(probs.iter().copied(), labels);
    let mut ce = 0.0;
    let mut grad = vec![0.0; diff.len()];
    for (((g, &d), &p), &l) in grad.iter_mut().zip(diff).zip(&probs).zip(labels) {
        let slope = p * (1.0 - p);
        match l {
            LABEL_FG => {
                ce += softplus(-d);
                *g = (p - 1.0) / n + dice.grad(1.0) * slope;
            }
            LABEL_BG => {
                ce += softplus(d);
                *g = p / n + dice.grad(0.0) * slope;
            }
            _ => {}
        }
    }
    let ce = ce / n;
    let dice_loss = dice.loss();
    Ok(LossOutput {
        value: ce + dice_loss,
        cross_entropy: ce,
        dice_loss,
        grad,
    })
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture(seed: u64, n: usize) -> (Vec<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
        labels[0] = LABEL_FG;
        (probs, labels)
    }

    #[test]
    fn unannotated_perturbation_leaves_loss_unchanged() {
        let (mut probs, labels) = fixture(1, 200);
        let before = masked_loss(&probs, &labels).unwrap().value;
        for (p, &l) in probs.iter_mut().zip(&labels) {
            if l == LABEL_NONE {
                *p = 1.0 - *p;
            }
        }
        assert_eq!(masked_loss(&probs, &labels).unwrap().value, before);
    }

    #[test]
    fn perfect_prediction_has_zero_dice_term() {
        let labels = vec![LABEL_FG, LABEL_BG, LABEL_NONE, LABEL_FG, LABEL_BG];
        let probs = vec![1.0, 0.0, 0.3, 1.0, 0.0];
        let out = masked_loss(&probs, &labels).unwrap();
        assert_eq!(out.dice_loss, 0.0);
        assert_eq!(out.cross_entropy, 0.0);
    }

    #[test]
    fn no_annotation_is_an_error() {
        assert!(matches!(masked_loss(&[0.5; 4], &[0; 4]), Err(Error::Empty(_))));
        assert!(masked_loss(&[0.5; 3], &[1; 4]).is_err());
        assert!(masked_loss(&[0.5; 2], &[1, 3]).is_err());
    }

    #[test]
    fn logit_form_agrees_with_probability_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let diff: Vec<f64> = (0..300).map(|_| rng.random_range(-4.0..4.0)).collect();
        let labels: Vec<u8> = (0..300).map(|_| rng.random_range(0..3)).collect();
        let probs: Vec<f64> = diff.iter().map(|&d| logistic(d)).collect();
        let a = masked_loss(&probs, &labels).unwrap();
        let b = masked_loss_logits(&diff, &labels).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        for i in 0..300 {
            let chained = a.grad[i] * probs[i] * (1.0 - probs[i]);
            assert!((chained - b.grad[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_logits_stay_finite() {
        let out = masked_loss_logits(&[-800.0, 800.0], &[LABEL_FG, LABEL_BG]).unwrap();
        assert!(out.value.is_finite() && out.value > 100.0);
        assert!(out.grad.iter().all(|g| g.is_finite()));
    }
}
