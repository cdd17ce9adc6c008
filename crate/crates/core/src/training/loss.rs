//! Label-smoothed focal loss built from differentiable primitives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{bce_with_logits_scalar, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
    None,
}

impl Reduction {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            "none" => Ok(Reduction::None),
            other => Err(Error::Config(format!("unknown reduction {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub smoothing: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            smoothing: 0.1,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("smoothing {} outside [0, 1]", self.smoothing)));
        }
        Ok(())
    }
}

/// `(1 − s)·t + s/2`
pub fn label_smooth(t: f64, s: f64) -> f64 {
    (1.0 - s) * t + s / 2.0
}

/// `α·(1 − p_t)^γ·BCE` per element, with `p_t = exp(−BCE)` against the
/// smoothed targets.
pub fn focal_loss(g: &mut Graph, logits: Var, targets: &[f64], cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let smoothed: Vec<f64> = targets.iter().map(|&t| label_smooth(t, cfg.smoothing)).collect();
    let bce = g.bce_with_logits(logits, &smoothed)?;
    let neg = g.scale(bce, -1.0);
    let p_t = g.exp(neg);
    let miss = g.affine(p_t, -1.0, 1.0);
    let modulator = g.pow(miss, cfg.gamma);
    let weighted = g.mul(modulator, bce)?;
    let f = g.scale(weighted, cfg.alpha);
    match cfg.reduction {
        Reduction::Mean => g.mean(f),
        Reduction::Sum => Ok(g.sum(f)),
        Reduction::None => Ok(f),
    }
}

/// Scalar form of [`focal_loss`] for one logit.
pub fn focal_loss_scalar(z: f64, t: f64, cfg: &LossConfig) -> f64 {
    let bce = bce_with_logits_scalar(z, label_smooth(t, cfg.smoothing));
    let p_t = (-bce).exp();
    cfg.alpha * (1.0 - p_t).powf(cfg.gamma) * bce
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};

    #[test]
    fn worked_scalar_case() {
        let cfg = LossConfig {
            alpha: 1.0,
            gamma: 2.0,
            smoothing: 0.0,
            reduction: Reduction::Mean,
        };
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let l = focal_loss(&mut g, z, &[1.0], &cfg).unwrap();
        let expected = 0.25 * std::f64::consts::LN_2;
        assert!((g.value(l).values()[0] - expected).abs() < 1e-12);
        assert!((focal_loss_scalar(0.0, 1.0, &cfg) - expected).abs() < 1e-12);
    }

    #[test]
    fn smoothing_and_reductions() {
        assert!((label_smooth(1.0, 0.1) - 0.95).abs() < 1e-15);
        assert_eq!(label_smooth(0.0, 0.1), 0.05);
        assert_eq!(label_smooth(1.0, 0.0), 1.0);
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![3, 1], vec![0.3, -1.0, 2.0]).unwrap());
        let t = [1.0, 0.0, 0.0];
        let base = LossConfig::default();
        let none = focal_loss(&mut g, z, &t, &LossConfig { reduction: Reduction::None, ..base }).unwrap();
        let each = g.value(none).values().to_vec();
        let sum = focal_loss(&mut g, z, &t, &LossConfig { reduction: Reduction::Sum, ..base }).unwrap();
        let mean = focal_loss(&mut g, z, &t, &base).unwrap();
        let total: f64 = each.iter().sum();
        assert!((g.value(sum).values()[0] - total).abs() < 1e-15);
        assert!((g.value(mean).values()[0] - total / 3.0).abs() < 1e-15);
        for (i, e) in each.iter().enumerate() {
            assert!((e - focal_loss_scalar([0.3, -1.0, 2.0][i], t[i], &base)).abs() < 1e-15);
        }
        assert!(Reduction::parse("median").is_err());
    }

    #[test]
    fn gradient_on_random_batch() {
        let z = Tensor::new(vec![5, 1], vec![0.4, -1.3, 2.2, -0.2, 0.9]).unwrap();
        let t = [1.0, 0.0, 1.0, 1.0, 0.0];
        let cfg = LossConfig::default();
        let err = grad_check(|g, x| focal_loss(g, x, &t, &cfg), &z, 1e-6).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }
}
