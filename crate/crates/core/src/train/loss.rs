use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability clamp applied before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the cross-entropy term.
    pub alpha: f64,
    /// Weight of the Dice term.
    pub beta: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            beta: 0.25,
            dice_eps: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with a positive sum, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::Config(format!("dice_eps must be positive, got {}", self.dice_eps)));
        }
        Ok(())
    }
}

fn check(probs: &Tensor, labels: &Tensor, op: &'static str) -> Result<()> {
    if probs.shape() != labels.shape() {
        return Err(Error::shape(op, probs.shape(), labels.shape()));
    }
    if probs.numel() == 0 {
        return Err(Error::Contract(format!("{op} of an empty tensor")));
    }
    Ok(())
}

/// Mean binary cross-entropy of clamped probabilities.
pub fn bce_loss(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    check(probs, labels, "bce_loss")?;
    let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pos = labels.mul(&p.ln())?;
    let neg = labels.neg().add_scalar(1.0).mul(&p.neg().add_scalar(1.0).ln())?;
    Ok(pos.add(&neg)?.mean().neg())
}

/// `1 − (2Σpy + eps) / (Σp + Σy + eps)` over the whole batch.
pub fn dice_loss(probs: &Tensor, labels: &Tensor, eps: f64) -> Result<Tensor> {
    check(probs, labels, "dice_loss")?;
    let inter = probs.mul(labels)?.sum().scale(2.0).add_scalar(eps);
    let denom = probs.sum().add(&labels.sum())?.add_scalar(eps);
    Ok(inter.div(&denom)?.neg().add_scalar(1.0))
}

pub fn combined_loss(probs: &Tensor, labels: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let bce = bce_loss(probs, labels)?;
    let dice = dice_loss(probs, labels, cfg.dice_eps)?;
    bce.scale(cfg.alpha).add(&dice.scale(cfg.beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use crate::tensor::{gradient_check, GradCheckOptions};
    use rand::Rng;

    fn random_labels(shape: &[usize], seed: u64) -> Tensor {
        let mut init = Init::new(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| if init.rng().random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        Tensor::new(data, shape).unwrap()
    }

    #[test]
    fn bce_reference_values() {
        let half = Tensor::full(&[4, 4], 0.5);
        let ones = Tensor::ones(&[4, 4]);
        let l = bce_loss(&half, &ones).unwrap().item().unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let y = random_labels(&[3, 5], 1);
        assert!(bce_loss(&y, &y).unwrap().item().unwrap() <= -(1.0 - 1e-7f64).ln() + 1e-15);
    }

    #[test]
    fn bce_matches_pixel_sum() {
        let y = random_labels(&[2, 1, 6, 6], 2);
        let p = Init::new(3).uniform(&[2, 1, 6, 6], 0.49).add_scalar(0.5);
        let oracle: f64 = p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / 72.0;
        assert!((bce_loss(&p, &y).unwrap().item().unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn dice_reference_values() {
        let y = random_labels(&[8, 8], 4);
        assert_eq!(dice_loss(&y, &y, 1.0).unwrap().item().unwrap(), 0.0);
        let z = Tensor::zeros(&[8, 8]);
        assert_eq!(dice_loss(&z, &z, 1.0).unwrap().item().unwrap(), 0.0);
        // quarter of a large image is crack, predictions all one
        let n = 1000 * 1000;
        let label: Vec<f64> = (0..n).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let y = Tensor::new(label, &[1000, 1000]).unwrap();
        let l = dice_loss(&Tensor::ones(&[1000, 1000]), &y, 1.0).unwrap().item().unwrap();
        assert!((l - 0.6).abs() < 1e-6, "{l}");
    }

    #[test]
    fn combined_reference_value_and_limits() {
        let p = Tensor::full(&[256, 256], 0.5);
        let y = Tensor::ones(&[256, 256]);
        let cfg = LossConfig::default();
        let l = combined_loss(&p, &y, &cfg).unwrap().item().unwrap();
        assert!((l - 0.603194).abs() < 1e-4, "{l}");

        let p = Init::new(5).uniform(&[3, 7], 0.45).add_scalar(0.5);
        let y = random_labels(&[3, 7], 6);
        let only_bce = LossConfig { alpha: 1.0, beta: 0.0, ..cfg };
        let only_dice = LossConfig { alpha: 0.0, beta: 1.0, ..cfg };
        assert_eq!(
            combined_loss(&p, &y, &only_bce).unwrap().item().unwrap(),
            bce_loss(&p, &y).unwrap().item().unwrap()
        );
        assert_eq!(
            combined_loss(&p, &y, &only_dice).unwrap().item().unwrap(),
            dice_loss(&p, &y, 1.0).unwrap().item().unwrap()
        );
    }

    #[test]
    fn combined_gradcheck() {
        let y = random_labels(&[2, 9], 7);
        let p = Init::new(8).uniform(&[2, 9], 0.4).add_scalar(0.5).param();
        let cfg = LossConfig::default();
        let r = gradient_check(
            |xs| combined_loss(&xs[0], &y, &cfg),
            &[p],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4 && r.checked > 0, "{r:?}");
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { alpha: 0.0, beta: 0.0, dice_eps: 1.0 }.validate().is_err());
        assert!(LossConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(bce_loss(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).is_err());
    }
}
