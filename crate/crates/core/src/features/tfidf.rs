//! TF-IDF note vectorizer with a document-frequency vocabulary cap.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    /// Terms in column order: document frequency descending, then lexicographic.
    pub vocabulary: Vec<String>,
    pub idf: Vec<f64>,
    pub n_docs_fitted: usize,
    /// Output width; columns past the vocabulary stay zero.
    pub dim: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TfidfModel {
    pub fn fit<S: AsRef<str>>(corpus: &[S], max_dim: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("TF-IDF corpus is empty".into()));
        }
        if max_dim == 0 {
            return Err(Error::Config("TF-IDF dimension must be positive".into()));
        }
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for doc in corpus {
            let mut terms = tokenize(doc.as_ref());
            terms.sort_unstable();
            terms.dedup();
            for t in terms {
                *df.entry(t).or_default() += 1;
            }
        }
        if df.is_empty() {
            return Err(Error::Data("empty vocabulary".into()));
        }
        let mut ranked: Vec<(String, usize)> = df.into_iter().collect();
        // BTreeMap already yields lexicographic order; a stable sort keeps it for ties.
        ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
        ranked.truncate(max_dim);

        let n = corpus.len() as f64;
        let idf = ranked
            .iter()
            .map(|(_, d)| ((1.0 + n) / (1.0 + *d as f64)).ln() + 1.0)
            .collect();
        let vocabulary: Vec<String> = ranked.into_iter().map(|(t, _)| t).collect();
        Ok(Self::from_parts(vocabulary, idf, corpus.len(), max_dim))
    }

    pub fn from_parts(vocabulary: Vec<String>, idf: Vec<f64>, n_docs_fitted: usize, dim: usize) -> Self {
        let index = vocabulary.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            vocabulary,
            idf,
            n_docs_fitted,
            dim,
            index,
        }
    }

    /// Rebuilds the term lookup after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.vocabulary.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    fn transform_one(&self, doc: &str, out: &mut [f64]) {
        for tok in tokenize(doc) {
            if let Some(&i) = self.index.get(&tok) {
                out[i] += 1.0;
            }
        }
        for (v, idf) in out.iter_mut().zip(&self.idf) {
            *v *= idf;
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|v| *v /= norm);
        }
    }

    /// One L2-normalized row per note, `m × dim`.
    pub fn transform<S: AsRef<str>>(&self, notes: &[S]) -> Tensor {
        let mut values = vec![0.0; notes.len() * self.dim];
        for (doc, row) in notes.iter().zip(values.chunks_mut(self.dim.max(1))) {
            self.transform_one(doc.as_ref(), row);
        }
        Tensor::new(vec![notes.len(), self.dim], values).expect("consistent shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("Chest-pain, SOB;x2"), ["chest", "pain", "sob", "x2"]);
    }

    #[test]
    fn ubiquitous_term_has_unit_idf() {
        let m = TfidfModel::fit(&["a b", "a c", "a"], 1024).unwrap();
        let i = m.vocabulary.iter().position(|t| t == "a").unwrap();
        assert_eq!(m.idf[i], 1.0);
        assert_eq!(m.vocabulary[0], "a");
    }

    #[test]
    fn single_document_vocabulary() {
        let m = TfidfModel::fit(&["x y z"], 1024).unwrap();
        assert_eq!(m.vocabulary.len(), 3);
    }

    #[test]
    fn vocabulary_capped() {
        let doc: String = (0..2000).map(|i| format!("w{i} ")).collect();
        let m = TfidfModel::fit(&[doc], 1024).unwrap();
        assert_eq!(m.vocabulary.len(), 1024);
        assert_eq!(m.transform(&["w1"]).shape(), &[1, 1024]);
    }

    #[test]
    fn ties_broken_lexicographically() {
        let m = TfidfModel::fit(&["b a c", "c"], 2).unwrap();
        assert_eq!(m.vocabulary, ["c", "a"]);
    }

    #[test]
    fn empty_vocabulary_errors() {
        assert!(matches!(TfidfModel::fit(&["", " ,; "], 8), Err(Error::Data(m)) if m == "empty vocabulary"));
        assert!(TfidfModel::fit::<&str>(&[], 8).is_err());
    }

    #[test]
    fn transform_rows() {
        let m = TfidfModel::from_parts(vec!["a".into(), "b".into()], vec![1.0, 1.0], 2, 4);
        let t = m.transform(&["", "b", "a a b", "zzz"]);
        assert_eq!(t.row(0), &[0.0; 4]);
        assert_eq!(t.row(1), &[0.0, 1.0, 0.0, 0.0]);
        let s5 = 5f64.sqrt();
        let r = t.row(2);
        assert!((r[0] - 2.0 / s5).abs() < 1e-15 && (r[1] - 1.0 / s5).abs() < 1e-15);
        assert_eq!(t.row(3), &[0.0; 4]);
    }

    #[test]
    fn batch_equals_stacked_single_transforms() {
        let m = TfidfModel::fit(&["a b c", "b c d", "d e"], 16).unwrap();
        let docs = ["a a d", "e", "c b z"];
        let batch = m.transform(&docs);
        for (i, d) in docs.iter().enumerate() {
            assert_eq!(batch.row(i), m.transform(&[d]).row(0));
        }
    }
}
