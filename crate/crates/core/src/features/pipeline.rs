//! Turns admission records into model-ready sequences.

use serde::{Deserialize, Serialize};

use super::forest::{feature_importances, train_random_forest};
use super::selection::{apply_selection, patient_mean_features, select_top_k, FeatureSelection};
use super::tfidf::TfidfModel;
use crate::data::{AdmissionRecord, Dataset, Notes, NotesKind, FEATURE_VECTOR_DIM};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ehr,
    Cxr,
    Notes,
}

impl Modality {
    /// Concatenation order used by the fusion head.
    pub const ALL: [Modality; 3] = [Modality::Ehr, Modality::Cxr, Modality::Notes];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Ehr => "ehr",
            Modality::Cxr => "cxr",
            Modality::Notes => "notes",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ehr" => Ok(Modality::Ehr),
            "cxr" | "image" | "images" => Ok(Modality::Cxr),
            "notes" | "note" => Ok(Modality::Notes),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// A `len × dim` sequence and its validity mask (`true` = real row,
/// `false` = padding).
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

impl Sequence {
    pub fn new(values: Tensor, mask: Vec<bool>) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() != mask.len() {
            return Err(Error::Dimension(format!(
                "sequence of shape {:?} with mask of length {}",
                values.shape(),
                mask.len()
            )));
        }
        Ok(Self { values, mask })
    }

    /// Every row is real.
    pub fn dense(values: Tensor) -> Self {
        let n = values.rows();
        Self {
            values,
            mask: vec![true; n],
        }
    }

    /// Appends `extra` masked zero rows.
    pub fn padded(&self, extra: usize) -> Self {
        let cols = self.values.cols();
        let mut v = self.values.values().to_vec();
        v.extend(std::iter::repeat_n(0.0, extra * cols));
        let mut mask = self.mask.clone();
        mask.extend(std::iter::repeat_n(false, extra));
        Self {
            values: Tensor::new(vec![mask.len(), cols], v).expect("consistent"),
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Post-pipeline numeric inputs of one admission.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub ehr: Option<Sequence>,
    pub cxr: Option<Sequence>,
    pub notes: Option<Sequence>,
}

impl FeatureBundle {
    pub fn get(&self, m: Modality) -> Option<&Sequence> {
        match m {
            Modality::Ehr => self.ehr.as_ref(),
            Modality::Cxr => self.cxr.as_ref(),
            Modality::Notes => self.notes.as_ref(),
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> Option<&mut Sequence> {
        match m {
            Modality::Ehr => self.ehr.as_mut(),
            Modality::Cxr => self.cxr.as_mut(),
            Modality::Notes => self.notes.as_mut(),
        }
    }
}

/// Longest sequence kept per modality; older entries are dropped first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceCaps {
    pub ehr_days: usize,
    pub images: usize,
    pub notes: usize,
}

impl Default for SequenceCaps {
    fn default() -> Self {
        Self {
            ehr_days: 64,
            images: 16,
            notes: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Number of EHR columns kept by forest selection; `None` keeps all.
    pub top_k: Option<usize>,
    pub n_trees: usize,
    pub seed: u64,
    pub tfidf_dim: usize,
    pub caps: SequenceCaps,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_k: Some(100),
            n_trees: 100,
            seed: 42,
            tfidf_dim: FEATURE_VECTOR_DIM,
            caps: SequenceCaps::default(),
        }
    }
}

/// Frozen feature transforms fit on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePipeline {
    pub selection: FeatureSelection,
    /// Per selected column, over all training days.
    pub ehr_mean: Vec<f64>,
    pub ehr_std: Vec<f64>,
    pub tfidf: Option<TfidfModel>,
    pub notes_kind: NotesKind,
    pub caps: SequenceCaps,
}

fn keep_last<T>(v: &[T], cap: usize) -> &[T] {
    &v[v.len().saturating_sub(cap)..]
}

fn placeholder(dim: usize) -> Sequence {
    Sequence::dense(Tensor::zeros(&[1, dim]))
}

impl FeaturePipeline {
    /// Fits selection, standardization and the note vectorizer on `train`.
    pub fn fit(train: &Dataset, cfg: &PipelineConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot fit features on an empty dataset".into()));
        }
        let d = train.ehr_dim().unwrap_or(0);
        let selection = match cfg.top_k {
            Some(k) => {
                if k > d {
                    return Err(Error::Config(format!("top-k {k} exceeds the {d} EHR columns")));
                }
                let (x, y) = patient_mean_features(train)?;
                let forest = train_random_forest(&x, &y, cfg.n_trees, cfg.seed)?;
                select_top_k(&feature_importances(&forest), k)?
            }
            None => FeatureSelection::identity(d),
        };
        Self::with_selection(train, selection, cfg)
    }

    /// Like [`FeaturePipeline::fit`] but with a precomputed selection.
    pub fn with_selection(train: &Dataset, selection: FeatureSelection, cfg: &PipelineConfig) -> Result<Self> {
        let k = selection.k();
        let mut sum = vec![0.0; k];
        let mut sq = vec![0.0; k];
        let mut n = 0usize;
        for rec in &train.records {
            let e = apply_selection(&rec.ehr, &selection)?;
            for r in 0..e.rows() {
                for (c, &v) in e.row(r).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += e.rows();
        }
        let nf = n.max(1) as f64;
        let ehr_mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let ehr_std = sq
            .iter()
            .zip(&ehr_mean)
            .map(|(s, m)| {
                let sd = (s / nf - m * m).max(0.0).sqrt();
                if sd > 1e-8 { sd } else { 1.0 }
            })
            .collect();

        let notes_kind = train
            .records
            .iter()
            .find(|r| !r.notes.is_empty())
            .map_or(NotesKind::Text, |r| r.notes.kind());
        let corpus: Vec<&str> = train
            .records
            .iter()
            .filter_map(|r| match &r.notes {
                Notes::Text(t) => Some(t.iter().map(String::as_str)),
                Notes::Vectors(_) => None,
            })
            .flatten()
            .collect();
        let tfidf = if notes_kind == NotesKind::Text && !corpus.is_empty() {
            Some(TfidfModel::fit(&corpus, cfg.tfidf_dim)?)
        } else {
            None
        };
        Ok(Self {
            selection,
            ehr_mean,
            ehr_std,
            tfidf,
            notes_kind,
            caps: cfg.caps,
        })
    }

    pub fn ehr_dim(&self) -> usize {
        self.selection.k()
    }

    pub fn notes_dim(&self) -> usize {
        self.tfidf.as_ref().map_or(FEATURE_VECTOR_DIM, |t| t.dim)
    }

    /// Errors if `ds` was not produced under the same schema as the training data.
    pub fn check_compatible(&self, ds: &Dataset) -> Result<()> {
        if let Some(d) = ds.ehr_dim() {
            if d != self.selection.d() {
                return Err(Error::Data(format!(
                    "dataset has {d} EHR columns but the model was fit on {}",
                    self.selection.d()
                )));
            }
        }
        if let Some(r) = ds.records.iter().find(|r| !r.notes.is_empty() && r.notes.kind() != self.notes_kind) {
            return Err(Error::Data(format!(
                "admission {} carries {:?} notes but the model expects {:?}",
                r.admission_id,
                r.notes.kind(),
                self.notes_kind
            )));
        }
        Ok(())
    }

    pub fn bundle(&self, rec: &AdmissionRecord) -> Result<FeatureBundle> {
        let days = keep_last(&rec.ehr, self.caps.ehr_days);
        let mut ehr = apply_selection(days, &self.selection)?;
        let k = self.ehr_dim();
        for chunk in ehr.values_mut().chunks_mut(k.max(1)) {
            for (c, v) in chunk.iter_mut().enumerate() {
                *v = (*v - self.ehr_mean[c]) / self.ehr_std[c];
            }
        }
        let ehr = if ehr.rows() == 0 { placeholder(k) } else { Sequence::dense(ehr) };

        let images = keep_last(&rec.cxr, self.caps.images);
        let cxr = if images.is_empty() {
            placeholder(FEATURE_VECTOR_DIM)
        } else {
            Sequence::dense(Tensor::from_rows(images)?)
        };

        let notes = match &rec.notes {
            Notes::Text(texts) => {
                let texts = keep_last(texts, self.caps.notes);
                match (&self.tfidf, texts.is_empty()) {
                    (Some(tfidf), false) => Sequence::dense(tfidf.transform(texts)),
                    _ => placeholder(self.notes_dim()),
                }
            }
            Notes::Vectors(vs) => {
                let vs = keep_last(vs, self.caps.notes);
                if vs.is_empty() {
                    placeholder(self.notes_dim())
                } else {
                    Sequence::dense(Tensor::from_rows(vs)?)
                }
            }
        };
        Ok(FeatureBundle {
            ehr: Some(ehr),
            cxr: Some(cxr),
            notes: Some(notes),
        })
    }

    pub fn bundle_all(&self, ds: &Dataset) -> Result<Vec<FeatureBundle>> {
        ds.records.iter().map(|r| self.bundle(r)).collect()
    }
}
