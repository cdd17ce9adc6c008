//! Learning-rate and noise-ratio schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear ramp from `r_initial` at epoch 0 to `r_final` at epoch `w`, then flat.
pub fn noise_ratio_linear(epoch: usize, w: usize, r_initial: f64, r_final: f64) -> f64 {
    if epoch < w {
        let frac = epoch as f64 / w as f64;
        r_initial * (1.0 - frac) + r_final * frac
    } else {
        r_final
    }
}

/// `A·sin(2π·epoch/period) + intercept`, unclamped.
pub fn noise_ratio_sinusoidal(epoch: usize, amplitude: f64, period: f64, intercept: f64) -> f64 {
    amplitude * (2.0 * std::f64::consts::PI / period * epoch as f64).sin() + intercept
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·epoch/T))`
pub fn cosine_lr(epoch: usize, lr_max: f64, lr_min: f64, t: usize) -> f64 {
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * epoch as f64 / t as f64).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NoiseSchedule {
    /// No noise.
    Off,
    Constant {
        ratio: f64,
    },
    /// `warmup` defaults to the total number of epochs.
    Linear {
        r_initial: f64,
        r_final: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        warmup: Option<usize>,
    },
    Sinusoidal {
        amplitude: f64,
        period: f64,
        intercept: f64,
    },
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::Linear {
            r_initial: 0.01,
            r_final: 0.1,
            warmup: None,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match *self {
            NoiseSchedule::Off => Ok(()),
            NoiseSchedule::Constant { ratio } if !(ratio >= 0.0 && ratio.is_finite()) => {
                bad(format!("noise ratio {ratio} must be non-negative"))
            }
            NoiseSchedule::Linear { r_initial, r_final, warmup } => {
                if !(r_initial >= 0.0 && r_final >= 0.0 && r_initial.is_finite() && r_final.is_finite()) {
                    bad(format!("noise ratios {r_initial}, {r_final} must be non-negative"))
                } else if warmup == Some(0) {
                    bad("noise warm-up must be at least one epoch".into())
                } else {
                    Ok(())
                }
            }
            NoiseSchedule::Sinusoidal { period, .. } if !(period > 0.0 && period.is_finite()) => {
                bad(format!("noise period {period} must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Ratio used at `epoch` of a run lasting `epochs`; negative values clamp to 0.
    pub fn ratio(&self, epoch: usize, epochs: usize) -> f64 {
        let r = match *self {
            NoiseSchedule::Off => 0.0,
            NoiseSchedule::Constant { ratio } => ratio,
            NoiseSchedule::Linear { r_initial, r_final, warmup } => {
                noise_ratio_linear(epoch, warmup.unwrap_or(epochs).max(1), r_initial, r_final)
            }
            NoiseSchedule::Sinusoidal {
                amplitude,
                period,
                intercept,
            } => noise_ratio_sinusoidal(epoch, amplitude, period, intercept),
        };
        r.max(0.0)
    }
}
