use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{glorot, Bound, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Dropout switch and randomness for one forward pass.
pub struct ForwardCtx<'a> {
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl ForwardCtx<'_> {
    /// No dropout; deterministic.
    pub fn eval() -> Self {
        ForwardCtx {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, rng: &mut ChaCha8Rng) -> ForwardCtx<'_> {
        ForwardCtx {
            dropout,
            rng: Some(rng),
        }
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let factor = (0..g.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        g.mul_const(x, factor)
    }
}

/// `x · W + b` with `W` stored as `in × out`; the bias is optional.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out)),
            bias: Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))),
        }
    }

    pub fn without_bias(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out)),
            bias: None,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), LAYER_NORM_EPS)
    }
}
