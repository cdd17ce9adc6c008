//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update: `w ← w − lr·(m̂/(√v̂ + eps) + λ·w)`.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamWState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::Dimension(format!(
                "parameter {i} has {} values but its gradient has {}",
                p.numel(),
                g.len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.values_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
            *w -= lr * (update + cfg.weight_decay * *w);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut p = vec![Tensor::from_rows(&[[1.5, -2.0]]).unwrap()];
        let before = p.clone();
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &[vec![0.0, 0.0]], &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn descends_and_converges_on_quadratic() {
        let mut p = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig::default();
        adamw_step(&mut p, &[vec![1.0]], &mut st, 1e-3, &cfg).unwrap();
        assert!(p[0].values()[0] < 1.0);

        let mut p = vec![Tensor::new(vec![2], vec![1.0, -0.5]).unwrap()];
        let mut st = AdamWState::new(&p);
        for _ in 0..200 {
            // f(w) = ½(w0² + 4·w1²)
            let w = p[0].values().to_vec();
            let g = vec![w[0], 4.0 * w[1]];
            adamw_step(&mut p, &[g], &mut st, 0.05, &cfg).unwrap();
        }
        let w = p[0].values();
        assert!((w[0] * w[0] + w[1] * w[1]).sqrt() < 1e-3, "{w:?}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros(&[3])];
        let mut st = AdamWState::new(&p);
        assert!(adamw_step(&mut p, &[vec![0.0; 2]], &mut st, 1e-3, &AdamWConfig::default()).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
