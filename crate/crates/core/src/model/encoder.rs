//! Pre-norm transformer encoder with key-padding masks.

use rand_chacha::ChaCha8Rng;

use super::layers::{ForwardCtx, LayerNorm, Linear};
use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Sinusoidal table: `PE(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `PE(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(length: usize, d_model: usize) -> Tensor {
    let mut v = vec![0.0; length * d_model];
    for pos in 0..length {
        for j in 0..d_model {
            let even = j - j % 2;
            let angle = pos as f64 / 10000f64.powf(even as f64 / d_model as f64);
            v[pos * d_model + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![length, d_model], v).expect("shape")
}

/// Multiplies embeddings by `√d_model` so that the unit-scale positional
/// table does not drown small inputs such as L2-normalised note vectors.
pub(crate) fn scale_embedding(g: &mut Graph, e: Var) -> Var {
    let d = g.value(e).cols() as f64;
    g.scale(e, d.sqrt())
}

pub(crate) fn require_live_rows(mask: &[bool]) -> Result<()> {
    if mask.iter().any(|&m| m) {
        Ok(())
    } else {
        Err(Error::Contract("sequence has no unmasked rows".into()))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    norm_attn: LayerNorm,
    /// Fused query/value projection.
    qv: Linear,
    /// Keys carry no bias: a key bias shifts every score in a row by the
    /// same amount, which softmax cancels, so it would never learn.
    key: Linear,
    attn_out: Linear,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize, d_ff: usize) -> Self {
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d_model),
            qv: Linear::new(store, rng, &format!("{name}.qv"), d_model, 2 * d_model),
            key: Linear::without_bias(store, rng, &format!("{name}.key"), d_model, d_model),
            attn_out: Linear::new(store, rng, &format!("{name}.attn_out"), d_model, d_model),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d_model),
            ff_in: Linear::new(store, rng, &format!("{name}.ff_in"), d_model, d_ff),
            ff_out: Linear::new(store, rng, &format!("{name}.ff_out"), d_ff, d_model),
        }
    }

    fn self_attention(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mask: &[bool],
        n_heads: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let d = g.value(x).cols();
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let qv = self.qv.forward(g, p, x)?;
        let keys = self.key.forward(g, p, x)?;
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let q = g.slice_cols(qv, h * hd, (h + 1) * hd)?;
            let k = g.slice_cols(keys, h * hd, (h + 1) * hd)?;
            let v = g.slice_cols(qv, d + h * hd, d + (h + 1) * hd)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let weights = g.masked_softmax(scores, 1, Some(mask))?;
            let weights = ctx.dropout(g, weights)?;
            heads.push(g.matmul(weights, v)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.attn_out.forward(g, p, merged)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mask: &[bool],
        n_heads: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let h = self.norm_attn.forward(g, p, x)?;
        let a = self.self_attention(g, p, h, mask, n_heads, ctx)?;
        let x = g.add(x, a)?;
        let h = self.norm_ff.forward(g, p, x)?;
        let f = self.ff_in.forward(g, p, h)?;
        let f = g.gelu(f);
        let f = ctx.dropout(g, f)?;
        let f = self.ff_out.forward(g, p, f)?;
        g.add(x, f)
    }
}

/// Embedding, positional encoding, `N` encoder layers and a final norm.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub embed: Linear,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
    pub n_heads: usize,
}

impl TransformerEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input_dim: usize,
        d_model: usize,
        d_ff: usize,
        n_layers: usize,
        n_heads: usize,
    ) -> Self {
        let embed = Linear::new(store, rng, &format!("{name}.embed"), input_dim, d_model);
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("{name}.layer{i}"), d_model, d_ff))
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{name}.final_norm"), d_model);
        Self {
            embed,
            layers,
            final_norm,
            n_heads,
        }
    }

    /// `seq × input_dim` → `seq × d_model`. Masked rows are excluded as
    /// attention keys; their own outputs are meaningless.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mask: &[bool],
        pe: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        require_live_rows(mask)?;
        let e = self.embed.forward(g, p, x)?;
        let e = scale_embedding(g, e);
        let mut h = g.add(e, pe)?;
        for layer in &self.layers {
            h = layer.forward(g, p, h, mask, self.n_heads, ctx)?;
        }
        self.final_norm.forward(g, p, h)
    }
}

/// Softmax-weighted sum of the rows of `h`, weights from `h · query`.
/// `query` is a `d × 1` column.
pub fn attention_pool(g: &mut Graph, h: Var, mask: &[bool], query: Var) -> Result<Var> {
    require_live_rows(mask)?;
    let scores = g.matmul(h, query)?;
    let scores = g.transpose(scores)?;
    let weights = g.masked_softmax(scores, 1, Some(mask))?;
    g.matmul(weights, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(4, 6);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!((pe.get2(1, 0) - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!((pe.get2(1, 1) - 1f64.cos()).abs() < 1e-15);
        // dims 2,3 share frequency 1/10000^(2/6)
        let w = 1.0 / 10000f64.powf(2.0 / 6.0);
        assert!((pe.get2(3, 2) - (3.0 * w).sin()).abs() < 1e-15);
        assert!((pe.get2(3, 3) - (3.0 * w).cos()).abs() < 1e-15);
    }

    #[test]
    fn pool_cases() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_rows(&[[0.3, -2.0]]).unwrap());
        let q = g.constant(Tensor::new(vec![2, 1], vec![0.7, 0.1]).unwrap());
        let out = attention_pool(&mut g, h, &[true], q).unwrap();
        assert_eq!(g.value(out).values(), &[0.3, -2.0]);

        let h = g.constant(Tensor::from_rows(&[[1.5, 2.5], [1.5, 2.5], [1.5, 2.5]]).unwrap());
        let out = attention_pool(&mut g, h, &[true; 3], q).unwrap();
        for (a, b) in g.value(out).values().iter().zip([1.5, 2.5]) {
            assert!((a - b).abs() < 1e-15);
        }

        let h = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let q = g.constant(Tensor::new(vec![2, 1], vec![200.0, 0.0]).unwrap());
        let out = attention_pool(&mut g, h, &[true, true], q).unwrap();
        let v = g.value(out).values();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);

        assert!(attention_pool(&mut g, h, &[false, false], q).is_err());
    }

    #[test]
    fn singleton_sequence_ignores_query_and_key_weights() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = TransformerEncoder::new(&mut store, &mut rng, "e", 3, 6, 8, 1, 2);
        let x = Tensor::from_rows(&[[0.2, -0.4, 1.1]]).unwrap();
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let pe = g.constant(positional_encoding(1, 6));
            let out = enc.encode(&mut g, &p, xv, &[true], pe, &mut ForwardCtx::eval()).unwrap();
            g.value(out).values().to_vec()
        };
        let before = run(&store);
        // scramble the query columns and the key projection
        let qv = enc.layers[0].qv.weight;
        for (i, v) in store.get_mut(qv).values_mut().iter_mut().enumerate() {
            if i % 12 < 6 {
                *v = (i as f64).sin() * 3.0;
            }
        }
        let key = enc.layers[0].key.weight;
        for (i, v) in store.get_mut(key).values_mut().iter_mut().enumerate() {
            *v = (i as f64).cos() * 2.0;
        }
        let after = run(&store);
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_padding_leaves_live_rows_unchanged() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = TransformerEncoder::new(&mut store, &mut rng, "e", 4, 6, 10, 2, 3);
        let rows = [[0.5, -1.0, 0.2, 0.0], [1.0, 0.3, -0.7, 2.0], [-0.1, 0.0, 0.9, -1.5]];
        let run = |n_pad: usize| {
            let mut all: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
            let mut mask = vec![true; 3];
            for i in 0..n_pad {
                all.push(vec![9.0 + i as f64; 4]);
                mask.push(false);
            }
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let xv = g.constant(Tensor::from_rows(&all).unwrap());
            let pe = g.constant(positional_encoding(all.len(), 6));
            let out = enc.encode(&mut g, &p, xv, &mask, pe, &mut ForwardCtx::eval()).unwrap();
            g.value(out).values()[..18].to_vec()
        };
        let base = run(0);
        let padded = run(4);
        for (a, b) in base.iter().zip(&padded) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn all_masked_sequence_rejected() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = TransformerEncoder::new(&mut store, &mut rng, "e", 2, 4, 4, 1, 2);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(Tensor::zeros(&[2, 2]));
        let pe = g.constant(positional_encoding(2, 4));
        assert!(enc.encode(&mut g, &p, xv, &[false, false], pe, &mut ForwardCtx::eval()).is_err());
    }
}
