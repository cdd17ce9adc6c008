//! Binary model container: magic, version, JSON header, raw little-endian f64s.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pt::{ModalityDims, PtConfig, PtModel};
use crate::error::{Error, Result};
use crate::features::FeaturePipeline;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RDMT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: PtConfig,
    dims: ModalityDims,
    pipeline: FeaturePipeline,
    params: Vec<ParamEntry>,
    fingerprint: String,
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    config: &'a PtConfig,
    dims: &'a ModalityDims,
    pipeline: &'a FeaturePipeline,
}

/// Stable SHA-256 over the architecture and the frozen feature transforms.
pub fn fingerprint(config: &PtConfig, dims: &ModalityDims, pipeline: &FeaturePipeline) -> String {
    let json = serde_json::to_vec(&FingerprintInput { config, dims, pipeline }).expect("serializable");
    hex::encode(Sha256::digest(json))
}

/// A trained model together with the transforms its inputs must go through.
#[derive(Clone, Debug)]
pub struct ModelArtifact {
    pub model: PtModel,
    pub pipeline: FeaturePipeline,
}

impl ModelArtifact {
    pub fn fingerprint(&self) -> String {
        fingerprint(self.model.config(), &self.model.dims(), &self.pipeline)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = self.model.params();
        let header = Header {
            config: self.model.config().clone(),
            dims: self.model.dims(),
            pipeline: self.pipeline.clone(),
            params: store
                .names()
                .iter()
                .zip(store.tensors())
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            fingerprint: self.fingerprint(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * store.count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in store.tensors() {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| Error::Format("header length overflows".into()))?;
        let header: Header =
            serde_json::from_slice(cur.take(len)?).map_err(|e| Error::Format(format!("bad header: {e}")))?;

        let mut names = Vec::with_capacity(header.params.len());
        let mut tensors = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            let raw = cur.take(n.checked_mul(8).ok_or_else(|| Error::Format("shape overflows".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            names.push(p.name.clone());
            tensors.push(Tensor::new(p.shape.clone(), values).map_err(|e| Error::Format(e.to_string()))?);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }

        let mut model = PtModel::new(header.config, header.dims, 0).map_err(|e| Error::Format(e.to_string()))?;
        model.load_params(&names, tensors)?;
        let mut pipeline = header.pipeline;
        if let Some(t) = pipeline.tfidf.as_mut() {
            t.reindex();
        }
        let artifact = Self { model, pipeline };
        if artifact.fingerprint() != header.fingerprint {
            return Err(Error::Format("fingerprint does not match the stored configuration".into()));
        }
        Ok(artifact)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "model file truncated: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::PipelineConfig;
    use crate::synth::{generate_synthetic, SynthConfig};

    fn artifact() -> ModelArtifact {
        let (ds, _) = generate_synthetic(&SynthConfig {
            n_patients: 20,
            d_ehr: 12,
            vocab_size: 40,
            ..SynthConfig::default()
        })
        .unwrap();
        let pipeline = FeaturePipeline::fit(
            &ds,
            &PipelineConfig {
                top_k: Some(4),
                n_trees: 5,
                tfidf_dim: 16,
                ..PipelineConfig::default()
            },
        )
        .unwrap();
        let cfg = PtConfig {
            d_model: 6,
            n_heads: 2,
            d_ff: 8,
            k_ehr: 4,
            ..PtConfig::default()
        };
        let dims = ModalityDims {
            ehr: 4,
            cxr: 1024,
            notes: pipeline.notes_dim(),
        };
        ModelArtifact {
            model: PtModel::new(cfg, dims, 3).unwrap(),
            pipeline,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = artifact();
        let bytes = a.to_bytes().unwrap();
        let b = ModelArtifact::from_bytes(&bytes).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.pipeline, b.pipeline);
        assert_eq!(b.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = artifact().to_bytes().unwrap();
        for cut in [0, 3, 10, 40, bytes.len() - 1] {
            assert!(matches!(ModelArtifact::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn tampered_header_detected() {
        let a = artifact();
        let mut bytes = a.to_bytes().unwrap();
        let fp = a.fingerprint();
        let pos = bytes.windows(fp.len()).position(|w| w == fp.as_bytes()).unwrap();
        bytes[pos] = if bytes[pos] == b'0' { b'1' } else { b'0' };
        assert!(matches!(ModelArtifact::from_bytes(&bytes), Err(Error::Format(_))));
    }
}
