//! GRU / LSTM stacks used as drop-in replacements for the transformer encoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{require_live_rows, scale_embedding};
use super::layers::Linear;
use super::params::{Bound, ParamStore};
use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecurrentKind {
    Gru,
    Lstm,
}

impl RecurrentKind {
    fn gates(self) -> usize {
        match self {
            RecurrentKind::Gru => 3,
            RecurrentKind::Lstm => 4,
        }
    }
}

/// One recurrent layer; input and hidden projections each carry a bias.
/// GRU gate order is `r, z, n`; LSTM order is `i, f, g, o`.
#[derive(Clone, Debug)]
pub struct RecurrentLayer {
    pub kind: RecurrentKind,
    pub input: Linear,
    pub hidden: Linear,
}

impl RecurrentLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, kind: RecurrentKind, d: usize) -> Self {
        let g = kind.gates();
        Self {
            kind,
            input: Linear::new(store, rng, &format!("{name}.input"), d, g * d),
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), d, g * d),
        }
    }

    /// Runs the recurrence from a zero state. Masked steps carry the
    /// previous state through unchanged.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mask: &[bool]) -> Result<Var> {
        let d = g.value(x).cols();
        let xs = self.input.forward(g, p, x)?;
        let mut h = g.constant(Tensor::zeros(&[1, d]));
        let mut c = g.constant(Tensor::zeros(&[1, d]));
        let mut outs = Vec::with_capacity(mask.len());
        for (t, &live) in mask.iter().enumerate() {
            if live {
                let xt = g.slice_rows(xs, t, t + 1)?;
                let ht = self.hidden.forward(g, p, h)?;
                match self.kind {
                    RecurrentKind::Gru => h = gru_cell(g, xt, ht, h, d)?,
                    RecurrentKind::Lstm => (h, c) = lstm_cell(g, xt, ht, c, d)?,
                }
            }
            outs.push(h);
        }
        g.concat_rows(&outs)
    }
}

fn gru_cell(g: &mut Graph, xt: Var, ht: Var, h: Var, d: usize) -> Result<Var> {
    let xr = g.slice_cols(xt, 0, 2 * d)?;
    let hr = g.slice_cols(ht, 0, 2 * d)?;
    let rz = g.add(xr, hr)?;
    let rz = g.sigmoid(rz);
    let r = g.slice_cols(rz, 0, d)?;
    let z = g.slice_cols(rz, d, 2 * d)?;
    let xn = g.slice_cols(xt, 2 * d, 3 * d)?;
    let hn = g.slice_cols(ht, 2 * d, 3 * d)?;
    let rhn = g.mul(r, hn)?;
    let n = g.add(xn, rhn)?;
    let n = g.tanh(n);
    // h' = n + z ⊙ (h − n)
    let diff = g.sub(h, n)?;
    let zd = g.mul(z, diff)?;
    g.add(n, zd)
}

fn lstm_cell(g: &mut Graph, xt: Var, ht: Var, c: Var, d: usize) -> Result<(Var, Var)> {
    let pre = g.add(xt, ht)?;
    let ifs = g.slice_cols(pre, 0, 2 * d)?;
    let ifs = g.sigmoid(ifs);
    let i = g.slice_cols(ifs, 0, d)?;
    let f = g.slice_cols(ifs, d, 2 * d)?;
    let gg = g.slice_cols(pre, 2 * d, 3 * d)?;
    let gg = g.tanh(gg);
    let o = g.slice_cols(pre, 3 * d, 4 * d)?;
    let o = g.sigmoid(o);
    let fc = g.mul(f, c)?;
    let ig = g.mul(i, gg)?;
    let c = g.add(fc, ig)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Embedding, positional encoding and a stack of recurrent layers.
#[derive(Clone, Debug)]
pub struct RecurrentEncoder {
    pub embed: Linear,
    pub layers: Vec<RecurrentLayer>,
}

impl RecurrentEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: RecurrentKind,
        input_dim: usize,
        d_model: usize,
        n_layers: usize,
    ) -> Self {
        let embed = Linear::new(store, rng, &format!("{name}.embed"), input_dim, d_model);
        let layers = (0..n_layers)
            .map(|i| RecurrentLayer::new(store, rng, &format!("{name}.layer{i}"), kind, d_model))
            .collect();
        Self { embed, layers }
    }

    pub fn encode(&self, g: &mut Graph, p: &Bound, x: Var, mask: &[bool], pe: Var) -> Result<Var> {
        require_live_rows(mask)?;
        let e = self.embed.forward(g, p, x)?;
        let e = scale_embedding(g, e);
        let mut h = g.add(e, pe)?;
        for layer in &self.layers {
            h = layer.forward(g, p, h, mask)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_many, sigmoid_scalar};
    use rand::SeedableRng;

    #[test]
    fn gru_zero_everything_stays_zero() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = RecurrentLayer::new(&mut store, &mut rng, "g", RecurrentKind::Gru, 4);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[3, 4]));
        let h = layer.forward(&mut g, &p, x, &[true; 3]).unwrap();
        assert!(g.value(h).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_single_step_matches_cell_formula() {
        let d = 3;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = RecurrentLayer::new(&mut store, &mut rng, "l", RecurrentKind::Lstm, d);
        for (i, v) in store.get_mut(layer.input.bias.unwrap()).values_mut().iter_mut().enumerate() {
            *v = 0.1 * i as f64 - 0.4;
        }
        let x = [0.7, -1.2, 0.3];
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(Tensor::from_rows(&[x]).unwrap());
        let h = layer.forward(&mut g, &p, xv, &[true]).unwrap();

        // zero state: pre = x·W_i + b_i + b_h
        let w = store.get(layer.input.weight);
        let bi = store.get(layer.input.bias.unwrap()).values();
        let bh = store.get(layer.hidden.bias.unwrap()).values();
        let pre: Vec<f64> = (0..4 * d)
            .map(|j| (0..d).map(|k| x[k] * w.get2(k, j)).sum::<f64>() + bi[j] + bh[j])
            .collect();
        for j in 0..d {
            let i = sigmoid_scalar(pre[j]);
            let gg = pre[2 * d + j].tanh();
            let o = sigmoid_scalar(pre[3 * d + j]);
            let c1 = i * gg;
            let expected = o * c1.tanh();
            assert!((g.value(h).values()[j] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn gru_three_steps_gradient() {
        let d = 3;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = RecurrentLayer::new(&mut store, &mut rng, "g", RecurrentKind::Gru, d);
        for (i, v) in store.get_mut(layer.hidden.bias.unwrap()).values_mut().iter_mut().enumerate() {
            *v = 0.05 * i as f64 - 0.2;
        }
        let x = Tensor::from_rows(&[[0.5, -0.3, 0.9], [-1.1, 0.4, 0.2], [0.3, 0.8, -0.6]]).unwrap();
        let mut inputs = vec![x];
        inputs.extend(store.tensors().iter().cloned());
        let err = grad_check_many(
            |g, vars| {
                let p = Bound::from_vars(vars[1..].to_vec());
                let h = layer.forward(g, &p, vars[0], &[true; 3])?;
                let h2 = g.mul(h, h)?;
                Ok(g.sum(h2))
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
