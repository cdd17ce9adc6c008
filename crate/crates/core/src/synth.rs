//! Synthetic admissions with a planted logistic ground truth.
//!
//! The label of every admission is drawn from
//! `sigmoid(Σ w_j · mean_days(ehr[:, j]) + Σ v_t · freq_t(notes) + b)` over a
//! known set of informative EHR columns and note tokens. The weights, the
//! bias and the informative sets are written to a metadata sidecar so that
//! recovery tests can compare against them.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{AdmissionRecord, Dataset, Notes, NotesKind, FEATURE_VECTOR_DIM};
use crate::error::{Error, Result};
use crate::features::tfidf::tokenize;
use crate::tensor::sigmoid_scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Inclusive range of admissions per patient.
    pub admissions_per_patient: (usize, usize),
    pub d_ehr: usize,
    pub n_informative_ehr: usize,
    /// Shared latent factors behind the non-informative EHR columns;
    /// 0 makes every column independent.
    pub noise_factors: usize,
    /// Token vocabulary; empty means `t000, t001, …` of size `vocab_size`.
    pub vocab: Vec<String>,
    pub vocab_size: usize,
    pub n_informative_tokens: usize,
    pub positive_rate: f64,
    /// Per-feature signal strength in standard-deviation units.
    pub ehr_weight: f64,
    pub token_weight: f64,
    /// Inclusive ranges for days, images and notes per admission.
    pub days: (usize, usize),
    pub images: (usize, usize),
    pub notes: (usize, usize),
    pub note_length: (usize, usize),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 500,
            admissions_per_patient: (2, 4),
            d_ehr: 171,
            n_informative_ehr: 5,
            noise_factors: 8,
            vocab: Vec::new(),
            vocab_size: 100,
            n_informative_tokens: 5,
            positive_rate: 0.17,
            ehr_weight: 2.0,
            token_weight: 2.0,
            days: (1, 10),
            images: (0, 4),
            notes: (1, 6),
            note_length: (10, 30),
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn vocabulary(&self) -> Vec<String> {
        if self.vocab.is_empty() {
            (0..self.vocab_size).map(|i| format!("t{i:03}")).collect()
        } else {
            self.vocab.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.n_informative_ehr > self.d_ehr {
            return bad(format!(
                "n_informative_ehr {} exceeds d_ehr {}",
                self.n_informative_ehr, self.d_ehr
            ));
        }
        if self.d_ehr == 0 {
            return bad("d_ehr must be positive".into());
        }
        let vocab = self.vocabulary();
        if vocab.len() < self.n_informative_tokens {
            return bad(format!(
                "vocabulary of {} tokens is smaller than n_informative_tokens {}",
                vocab.len(),
                self.n_informative_tokens
            ));
        }
        if vocab.is_empty() {
            return bad("vocabulary is empty".into());
        }
        for tok in &vocab {
            if tokenize(tok) != [tok.to_lowercase()] {
                return bad(format!("token {tok:?} is not a single lowercase alphanumeric word"));
            }
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return bad(format!("positive_rate {} not in (0,1)", self.positive_rate));
        }
        for (name, (lo, hi)) in [
            ("admissions_per_patient", self.admissions_per_patient),
            ("days", self.days),
            ("images", self.images),
            ("notes", self.notes),
            ("note_length", self.note_length),
        ] {
            if lo > hi {
                return bad(format!("{name}: empty range {lo}..={hi}"));
            }
        }
        if self.admissions_per_patient.0 == 0 || self.days.0 == 0 {
            return bad("every patient needs an admission and every admission a day".into());
        }
        Ok(())
    }
}

/// Ground truth written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub informative_ehr: Vec<usize>,
    pub informative_tokens: Vec<String>,
    /// Weights on the raw per-admission column means.
    pub ehr_weights: Vec<f64>,
    /// Weights on the raw token frequencies.
    pub token_weights: Vec<f64>,
    pub bias: f64,
    pub seed: u64,
    pub target_positive_rate: f64,
    pub empirical_positive_rate: f64,
}

impl SynthMeta {
    /// The generator's own logit: the Bayes-optimal score for its labels.
    pub fn oracle_logit(&self, rec: &AdmissionRecord) -> f64 {
        let means = column_means(&rec.ehr, &self.informative_ehr);
        let freqs = match &rec.notes {
            Notes::Text(texts) => token_frequencies(texts, &self.informative_tokens),
            Notes::Vectors(_) => vec![0.0; self.informative_tokens.len()],
        };
        linear(&means, &self.ehr_weights) + linear(&freqs, &self.token_weights) + self.bias
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(File::open(path)?)?)
    }
}

/// `<out>.meta.json` next to a dataset file.
pub fn meta_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn linear(x: &[f64], w: &[f64]) -> f64 {
    x.iter().zip(w).map(|(a, b)| a * b).sum()
}

fn column_means(ehr: &[Vec<f64>], cols: &[usize]) -> Vec<f64> {
    let n = ehr.len().max(1) as f64;
    cols.iter()
        .map(|&c| ehr.iter().map(|day| day[c]).sum::<f64>() / n)
        .collect()
}

fn token_frequencies(texts: &[String], tokens: &[String]) -> Vec<f64> {
    let mut counts = vec![0usize; tokens.len()];
    let mut total = 0usize;
    for text in texts {
        for tok in tokenize(text) {
            total += 1;
            if let Some(i) = tokens.iter().position(|t| *t == tok) {
                counts[i] += 1;
            }
        }
    }
    let total = total.max(1) as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Dataset, SynthMeta)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = cfg.vocabulary();

    let mut informative_ehr = sample(&mut rng, cfg.d_ehr, cfg.n_informative_ehr).into_vec();
    informative_ehr.sort_unstable();
    let mut tok_idx = sample(&mut rng, vocab.len(), cfg.n_informative_tokens).into_vec();
    tok_idx.sort_unstable();
    let informative_tokens: Vec<String> = tok_idx.iter().map(|&i| vocab[i].to_lowercase()).collect();

    // heterogeneous column scales, as raw lab values would have
    let offsets: Vec<f64> = (0..cfg.d_ehr).map(|_| 3.0 * normal(&mut rng)).collect();
    let scales: Vec<f64> = (0..cfg.d_ehr).map(|_| rng.gen_range(-1.0f64..1.0).exp()).collect();
    let ehr_signs: Vec<f64> = informative_ehr.iter().map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let tok_signs: Vec<f64> = tok_idx.iter().map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    // non-informative columns share a few latent factors, like the
    // correlated panels of real lab data; informative ones stay independent
    let norm = (cfg.noise_factors.max(1) as f64).sqrt();
    let loadings: Vec<Option<Vec<f64>>> = (0..cfg.d_ehr)
        .map(|j| {
            (cfg.noise_factors > 0 && informative_ehr.binary_search(&j).is_err())
                .then(|| (0..cfg.noise_factors).map(|_| normal(&mut rng) / norm).collect())
        })
        .collect();

    let mut records = Vec::new();
    for p in 0..cfg.n_patients {
        let pid = format!("P{p:05}");
        let n_adm = rng.gen_range(cfg.admissions_per_patient.0..=cfg.admissions_per_patient.1);
        for a in 0..n_adm {
            let n_days = rng.gen_range(cfg.days.0..=cfg.days.1);
            let factors: Vec<f64> = (0..cfg.noise_factors).map(|_| normal(&mut rng)).collect();
            let latent: Vec<f64> = (0..cfg.d_ehr)
                .map(|j| {
                    let own = normal(&mut rng);
                    match &loadings[j] {
                        Some(l) => linear(&factors, l) + 0.3 * own,
                        None => own,
                    }
                })
                .collect();
            let ehr: Vec<Vec<f64>> = (0..n_days)
                .map(|_| {
                    (0..cfg.d_ehr)
                        .map(|j| offsets[j] + scales[j] * (latent[j] + 0.7 * normal(&mut rng)))
                        .collect()
                })
                .collect();

            let n_img = rng.gen_range(cfg.images.0..=cfg.images.1);
            let cxr: Vec<Vec<f64>> = (0..n_img)
                .map(|_| {
                    (0..FEATURE_VECTOR_DIM)
                        .map(|_| (normal(&mut rng).abs() * 1000.0).round() / 1000.0)
                        .collect()
                })
                .collect();

            let mut weights = vec![1.0; vocab.len()];
            for &i in &tok_idx {
                weights[i] = 4.0 * (0.9 * normal(&mut rng)).exp();
            }
            let dist = WeightedIndex::new(&weights).expect("positive weights");
            let n_notes = rng.gen_range(cfg.notes.0..=cfg.notes.1);
            let notes: Vec<String> = (0..n_notes)
                .map(|_| {
                    let len = rng.gen_range(cfg.note_length.0..=cfg.note_length.1);
                    (0..len)
                        .map(|_| vocab[dist.sample(&mut rng)].as_str())
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();

            records.push(AdmissionRecord {
                patient_id: pid.clone(),
                admission_id: format!("{pid}-A{}", a + 1),
                ehr,
                cxr,
                notes: Notes::Text(notes),
                notes_kind: NotesKind::Text,
                label: 0,
            });
        }
    }

    // Express the planted weights on raw feature scales so that every
    // informative feature contributes `weight` logits per standard deviation.
    let ehr_feats: Vec<Vec<f64>> = records.iter().map(|r| column_means(&r.ehr, &informative_ehr)).collect();
    let tok_feats: Vec<Vec<f64>> = records
        .iter()
        .map(|r| match &r.notes {
            Notes::Text(t) => token_frequencies(t, &informative_tokens),
            Notes::Vectors(_) => unreachable!(),
        })
        .collect();
    let mut bias = 0.0;
    let mut ehr_weights = Vec::new();
    for (k, sign) in ehr_signs.iter().enumerate() {
        let col: Vec<f64> = ehr_feats.iter().map(|f| f[k]).collect();
        let (m, s) = mean_std(&col);
        let w = sign * cfg.ehr_weight / s.max(1e-12);
        ehr_weights.push(w);
        bias -= w * m;
    }
    let mut token_weights = Vec::new();
    for (k, sign) in tok_signs.iter().enumerate() {
        let col: Vec<f64> = tok_feats.iter().map(|f| f[k]).collect();
        let (m, s) = mean_std(&col);
        let w = sign * cfg.token_weight / s.max(1e-12);
        token_weights.push(w);
        bias -= w * m;
    }
    let scores: Vec<f64> = ehr_feats
        .iter()
        .zip(&tok_feats)
        .map(|(e, t)| linear(e, &ehr_weights) + linear(t, &token_weights) + bias)
        .collect();

    // Fixed uniforms, then shift the intercept until the realised positive
    // count matches the target rate.
    let uniforms: Vec<f64> = scores.iter().map(|_| rng.gen::<f64>()).collect();
    let target = (cfg.positive_rate * records.len() as f64).round() as usize;
    let count = |shift: f64| {
        scores
            .iter()
            .zip(&uniforms)
            .filter(|(s, u)| **u < sigmoid_scalar(**s + shift))
            .count()
    };
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if count(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let shift = if count(hi).abs_diff(target) <= count(lo).abs_diff(target) { hi } else { lo };
    bias += shift;
    for ((rec, s), u) in records.iter_mut().zip(&scores).zip(&uniforms) {
        rec.label = u8::from(*u < sigmoid_scalar(s + shift));
    }

    let positives = records.iter().filter(|r| r.label == 1).count();
    let meta = SynthMeta {
        informative_ehr,
        informative_tokens,
        ehr_weights,
        token_weights,
        bias,
        seed: cfg.seed,
        target_positive_rate: cfg.positive_rate,
        empirical_positive_rate: positives as f64 / records.len() as f64,
    };
    let names = (0..cfg.d_ehr).map(|j| format!("ehr_{j}")).collect();
    Ok((Dataset::new(records, names)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_patients: 60,
            d_ehr: 12,
            images: (0, 1),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn positive_rate_is_hit() {
        let cfg = SynthConfig {
            images: (0, 0),
            ..SynthConfig::default()
        };
        let (ds, meta) = generate_synthetic(&cfg).unwrap();
        let rate = ds.meta().positives as f64 / ds.len() as f64;
        assert!((0.14..=0.20).contains(&rate), "rate {rate}");
        assert_eq!(rate, meta.empirical_positive_rate);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_logit_reproduces_the_sampling_scores() {
        let (ds, meta) = generate_synthetic(&small()).unwrap();
        // mean positive score must exceed mean negative score
        let (mut pos, mut neg) = (vec![], vec![]);
        for r in &ds.records {
            let z = meta.oracle_logit(r);
            if r.label == 1 { pos.push(z) } else { neg.push(z) }
        }
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(m(&pos) > m(&neg));
    }

    #[test]
    fn shapes_follow_config() {
        let (ds, _) = generate_synthetic(&small()).unwrap();
        for r in &ds.records {
            assert!((1..=10).contains(&r.ehr.len()));
            assert!(r.ehr.iter().all(|d| d.len() == 12));
            assert!(r.cxr.len() <= 1);
            assert!((1..=6).contains(&r.notes.len()));
        }
        assert_eq!(ds.meta().patients, 60);
    }

    #[test]
    fn config_errors() {
        let cfg = SynthConfig {
            vocab: vec!["a".into(), "b".into()],
            n_informative_tokens: 3,
            ..small()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig {
            n_informative_ehr: 13,
            ..small()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn meta_path_appends_suffix() {
        assert_eq!(meta_path(Path::new("out/d.jsonl")), PathBuf::from("out/d.jsonl.meta.json"));
    }
}
