//! Patient-grouped K-fold training and probability-averaging ensembles.

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::trainer::{EpochStats, TrainConfig};
use super::train_model;
use crate::data::{patient_folds, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::Predictor;
use crate::features::{FeatureBundle, FeaturePipeline, PipelineConfig};
use crate::model::{ModelArtifact, PtConfig};

/// Members whose probabilities are averaged.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<ModelArtifact>,
}

/// Mean of the members' probabilities for one bundled admission.
pub fn ensemble_predict(ensemble: &Ensemble, fb: &FeatureBundle) -> Result<f64> {
    if ensemble.members.is_empty() {
        return Err(Error::Contract("ensemble has no members".into()));
    }
    let total = ensemble
        .members
        .iter()
        .map(|m| m.model.predict_proba(fb))
        .sum::<Result<f64>>()?;
    Ok(total / ensemble.members.len() as f64)
}

impl Predictor for Ensemble {
    fn predict(&self, ds: &Dataset) -> Result<Vec<f64>> {
        if self.members.is_empty() {
            return Err(Error::Contract("ensemble has no members".into()));
        }
        let mut sum = vec![0.0; ds.len()];
        for m in &self.members {
            for (s, p) in sum.iter_mut().zip(m.predict(ds)?) {
                *s += p;
            }
        }
        let k = self.members.len() as f64;
        Ok(sum.into_iter().map(|s| s / k).collect())
    }

    fn parameter_count(&self) -> usize {
        self.members.iter().map(|m| m.model.count_parameters()).sum()
    }

    fn fingerprint(&self) -> String {
        let prints: Vec<String> = self.members.iter().map(ModelArtifact::fingerprint).collect();
        if prints.windows(2).all(|w| w[0] == w[1]) {
            return prints.into_iter().next().unwrap_or_default();
        }
        hex::encode(Sha256::digest(prints.join(",")))
    }
}

#[derive(Clone, Debug)]
pub struct KFoldOutcome {
    pub ensemble: Ensemble,
    /// Validation patients of each fold.
    pub folds: Vec<BTreeSet<String>>,
    pub fold_val_auc: Vec<f64>,
    pub histories: Vec<Vec<EpochStats>>,
    pub seconds: f64,
}

/// Fits the feature pipeline once on `ds`, then trains fold `i` on the
/// other folds with seed `seed + i`, validating on fold `i`.
pub fn kfold_train(
    ds: &Dataset,
    k: usize,
    pipeline_cfg: &PipelineConfig,
    model_cfg: &PtConfig,
    train_cfg: &TrainConfig,
) -> Result<KFoldOutcome> {
    patient_folds(ds, k, train_cfg.seed)?;
    let pipeline = FeaturePipeline::fit(ds, pipeline_cfg)?;
    kfold_train_with(ds, k, &pipeline, model_cfg, train_cfg)
}

/// [`kfold_train`] with an already fitted pipeline shared by every member.
pub fn kfold_train_with(
    ds: &Dataset,
    k: usize,
    pipeline: &FeaturePipeline,
    model_cfg: &PtConfig,
    train_cfg: &TrainConfig,
) -> Result<KFoldOutcome> {
    let started = Instant::now();
    let folds = patient_folds(ds, k, train_cfg.seed)?;
    let all: BTreeSet<String> = ds.patient_ids().into_iter().collect();
    let results = (0..k)
        .into_par_iter()
        .map(|i| {
            let train_ids: BTreeSet<String> = all.difference(&folds[i]).cloned().collect();
            let cfg = TrainConfig {
                seed: train_cfg.seed.wrapping_add(i as u64),
                ..train_cfg.clone()
            };
            log::info!("fold {}/{k}", i + 1);
            train_model(pipeline.clone(), &ds.subset(&train_ids), &ds.subset(&folds[i]), model_cfg, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut members = Vec::with_capacity(k);
    let mut fold_val_auc = Vec::with_capacity(k);
    let mut histories = Vec::with_capacity(k);
    for (artifact, outcome) in results {
        fold_val_auc.push(outcome.best_val_auc().unwrap_or(f64::NAN));
        histories.push(outcome.history);
        members.push(artifact);
    }
    Ok(KFoldOutcome {
        ensemble: Ensemble { members },
        folds,
        fold_val_auc,
        histories,
        seconds: started.elapsed().as_secs_f64(),
    })
}
