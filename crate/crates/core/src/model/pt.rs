//! Per-modality encoders, attention pooling and the fusion head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoder::{attention_pool, positional_encoding, TransformerEncoder};
use super::layers::{ForwardCtx, Linear};
use super::params::{Bound, ParamId, ParamStore};
use super::recurrent::{RecurrentEncoder, RecurrentKind};
use crate::data::FEATURE_VECTOR_DIM;
use crate::error::{Error, Result};
use crate::features::{FeatureBundle, Modality};
use crate::tensor::{sigmoid_scalar, Graph, Tensor, Var};

/// Which sequence encoder each modality branch uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Transformer,
    Gru,
    Lstm,
}

impl EncoderKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "transformer" | "pt" => Ok(EncoderKind::Transformer),
            "gru" => Ok(EncoderKind::Gru),
            "lstm" => Ok(EncoderKind::Lstm),
            other => Err(Error::Config(format!("unknown encoder {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Transformer => "transformer",
            EncoderKind::Gru => "gru",
            EncoderKind::Lstm => "lstm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PtConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ehr_layers: usize,
    pub notes_layers: usize,
    pub cxr_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub k_ehr: usize,
    pub active_modalities: Vec<Modality>,
    pub encoder: EncoderKind,
}

impl Default for PtConfig {
    fn default() -> Self {
        Self {
            d_model: 96,
            n_heads: 3,
            ehr_layers: 2,
            notes_layers: 3,
            cxr_layers: 2,
            d_ff: 192,
            dropout: 0.1,
            k_ehr: 100,
            active_modalities: vec![Modality::Ehr, Modality::Notes],
            encoder: EncoderKind::Transformer,
        }
    }
}

impl PtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.active_modalities.is_empty() {
            return Err(Error::Config("at least one modality must be active".into()));
        }
        let mut seen = self.active_modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.active_modalities.len() {
            return Err(Error::Config("active modalities contain duplicates".into()));
        }
        Ok(())
    }

    /// Active modalities in fusion order (EHR, CXR, notes).
    pub fn modalities(&self) -> Vec<Modality> {
        let mut m = self.active_modalities.clone();
        m.sort();
        m.dedup();
        m
    }

    pub fn layers_for(&self, m: Modality) -> usize {
        match m {
            Modality::Ehr => self.ehr_layers,
            Modality::Cxr => self.cxr_layers,
            Modality::Notes => self.notes_layers,
        }
    }
}

/// Input width of each modality's sequence rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDims {
    pub ehr: usize,
    pub cxr: usize,
    pub notes: usize,
}

impl ModalityDims {
    pub fn from_config(cfg: &PtConfig) -> Self {
        Self {
            ehr: cfg.k_ehr,
            cxr: FEATURE_VECTOR_DIM,
            notes: FEATURE_VECTOR_DIM,
        }
    }

    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Ehr => self.ehr,
            Modality::Cxr => self.cxr,
            Modality::Notes => self.notes,
        }
    }
}

#[derive(Clone, Debug)]
enum BranchEncoder {
    Transformer(TransformerEncoder),
    Recurrent(RecurrentEncoder),
}

#[derive(Clone, Debug)]
struct Branch {
    modality: Modality,
    input_dim: usize,
    encoder: BranchEncoder,
    query: ParamId,
}

const PE_CACHE_LEN: usize = 64;

#[derive(Clone, Debug)]
pub struct PtModel {
    config: PtConfig,
    dims: ModalityDims,
    store: ParamStore,
    branches: Vec<Branch>,
    fusion_hidden: Linear,
    fusion_out: Linear,
    pe: Tensor,
}

impl PtModel {
    /// Builds a freshly initialized model; the same `(config, dims, seed)`
    /// always yields the same parameters.
    pub fn new(config: PtConfig, dims: ModalityDims, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let d = config.d_model;
        let mut branches = Vec::new();
        for m in config.modalities() {
            let input_dim = dims.get(m);
            if input_dim == 0 {
                return Err(Error::Config(format!("{} input width is zero", m.name())));
            }
            let name = m.name();
            let n_layers = config.layers_for(m);
            let encoder = match config.encoder {
                EncoderKind::Transformer => BranchEncoder::Transformer(TransformerEncoder::new(
                    &mut store,
                    &mut rng,
                    name,
                    input_dim,
                    d,
                    config.d_ff,
                    n_layers,
                    config.n_heads,
                )),
                EncoderKind::Gru | EncoderKind::Lstm => {
                    let kind = if config.encoder == EncoderKind::Gru {
                        RecurrentKind::Gru
                    } else {
                        RecurrentKind::Lstm
                    };
                    BranchEncoder::Recurrent(RecurrentEncoder::new(
                        &mut store, &mut rng, name, kind, input_dim, d, n_layers,
                    ))
                }
            };
            let query = store.add(format!("{name}.pool_query"), Tensor::zeros(&[d, 1]));
            branches.push(Branch {
                modality: m,
                input_dim,
                encoder,
                query,
            });
        }
        let n = branches.len();
        let fusion_hidden = Linear::new(&mut store, &mut rng, "fusion.hidden", n * d, d);
        let fusion_out = Linear::new(&mut store, &mut rng, "fusion.out", d, 1);
        Ok(Self {
            pe: positional_encoding(PE_CACHE_LEN, d),
            config,
            dims,
            store,
            branches,
            fusion_hidden,
            fusion_out,
        })
    }

    pub fn config(&self) -> &PtConfig {
        &self.config
    }

    pub fn dims(&self) -> ModalityDims {
        self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.branches.iter().map(|b| b.modality).collect()
    }

    /// Exact number of learnable scalars.
    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    fn positional(&self, len: usize) -> Tensor {
        let d = self.config.d_model;
        if len <= PE_CACHE_LEN {
            Tensor::new(vec![len, d], self.pe.values()[..len * d].to_vec()).expect("shape")
        } else {
            positional_encoding(len, d)
        }
    }

    /// Concatenates pooled vectors (fusion order) and maps them to a `1 × 1` logit.
    pub fn fuse_and_predict(&self, g: &mut Graph, p: &Bound, pooled: &[Var]) -> Result<Var> {
        if pooled.len() != self.branches.len() {
            return Err(Error::Contract(format!(
                "fusion expects {} pooled vectors, got {}",
                self.branches.len(),
                pooled.len()
            )));
        }
        let h = if pooled.len() == 1 { pooled[0] } else { g.concat_cols(pooled)? };
        let h = self.fusion_hidden.forward(g, p, h)?;
        let h = g.gelu(h);
        self.fusion_out.forward(g, p, h)
    }

    /// Records the full forward pass of one admission in `g`; returns its `1 × 1` logit.
    pub fn logit_graph(&self, g: &mut Graph, p: &Bound, fb: &FeatureBundle, ctx: &mut ForwardCtx) -> Result<Var> {
        let mut pooled = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let seq = fb
                .get(b.modality)
                .ok_or_else(|| Error::Contract(format!("feature bundle lacks the {} modality", b.modality.name())))?;
            if seq.values.cols() != b.input_dim {
                return Err(Error::Dimension(format!(
                    "{} rows have width {} but the model expects {}",
                    b.modality.name(),
                    seq.values.cols(),
                    b.input_dim
                )));
            }
            let x = g.constant(seq.values.clone());
            let pe = g.constant(self.positional(seq.len()));
            let h = match &b.encoder {
                BranchEncoder::Transformer(enc) => enc.encode(g, p, x, &seq.mask, pe, ctx)?,
                BranchEncoder::Recurrent(enc) => enc.encode(g, p, x, &seq.mask, pe)?,
            };
            let q = p.var(b.query);
            pooled.push(attention_pool(g, h, &seq.mask, q)?);
        }
        self.fuse_and_predict(g, p, &pooled)
    }

    /// Eval-mode logit of one admission.
    pub fn forward(&self, fb: &FeatureBundle) -> Result<f64> {
        Ok(self.logits(std::slice::from_ref(fb))?[0])
    }

    pub fn predict_proba(&self, fb: &FeatureBundle) -> Result<f64> {
        self.forward(fb).map(sigmoid_scalar)
    }

    /// Eval-mode logits, in input order.
    pub fn logits(&self, fbs: &[FeatureBundle]) -> Result<Vec<f64>> {
        const CHUNK: usize = 32;
        let chunks: Vec<Vec<f64>> = fbs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = Graph::new();
                let p = self.store.bind(&mut g, false);
                chunk
                    .iter()
                    .map(|fb| {
                        let z = self.logit_graph(&mut g, &p, fb, &mut ForwardCtx::eval())?;
                        Ok(g.value(z).values()[0])
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    pub fn predict_proba_many(&self, fbs: &[FeatureBundle]) -> Result<Vec<f64>> {
        Ok(self.logits(fbs)?.into_iter().map(sigmoid_scalar).collect())
    }

    /// Replaces all parameters, checking names and shapes.
    pub fn load_params(&mut self, names: &[String], tensors: Vec<Tensor>) -> Result<()> {
        if names.len() != self.store.len() || tensors.len() != self.store.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                self.store.len(),
                tensors.len()
            )));
        }
        for (i, (name, t)) in names.iter().zip(tensors).enumerate() {
            let slot = &mut self.store.tensors_mut()[i];
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?} but the architecture needs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if self.store.names() != names {
            return Err(Error::Format("parameter names do not match the architecture".into()));
        }
        Ok(())
    }
}
