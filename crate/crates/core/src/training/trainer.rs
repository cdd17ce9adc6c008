//! The epoch loop: shuffle, noise, forward, focal loss, backward, clip, AdamW.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{focal_loss, LossConfig, Reduction};
use super::noise::inject_noise_batch;
use super::optim::{adamw_step, clip_grad_norm, AdamWConfig, AdamWState};
use super::schedule::{cosine_lr, NoiseSchedule};
use crate::error::{Error, Result};
use crate::evaluation::auc;
use crate::features::FeatureBundle;
use crate::model::{ForwardCtx, ParamStore, PtModel};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    pub noise: NoiseSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr_max: 1e-3,
            lr_min: 5e-4,
            grad_clip: 1.0,
            optimizer: AdamWConfig::default(),
            loss: LossConfig::default(),
            noise: NoiseSchedule::default(),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 ≤ lr_min ≤ lr_max and lr_max > 0, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        self.loss.validate()?;
        if self.loss.reduction == Reduction::None {
            return Err(Error::Config("training needs a mean or sum loss reduction".into()));
        }
        self.noise.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when the validation split is empty or single-class.
    pub val_auc: f64,
    pub lr: f64,
    pub noise_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation AUC (the last
    /// epoch if validation AUC was never defined).
    pub model: PtModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub seconds_per_epoch: f64,
}

impl TrainOutcome {
    pub fn best_val_auc(&self) -> Option<f64> {
        self.history.get(self.best_epoch).map(|h| h.val_auc).filter(|a| !a.is_nan())
    }
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochStats]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "epoch,train_loss,val_auc,lr,noise_ratio")?;
    for h in history {
        writeln!(f, "{},{},{},{},{}", h.epoch, h.train_loss, h.val_auc, h.lr, h.noise_ratio)?;
    }
    f.flush()?;
    Ok(())
}

fn validation_auc(model: &PtModel, val: &[FeatureBundle], labels: &[u8]) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let scores = model.logits(val)?;
    match auc(&scores, labels) {
        Ok(a) => Ok(a),
        Err(Error::Data(_)) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

/// Trains `model` in place of a copy and returns the best snapshot.
pub fn train(
    mut model: PtModel,
    train: &[FeatureBundle],
    train_labels: &[u8],
    val: &[FeatureBundle],
    val_labels: &[u8],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if train.len() != train_labels.len() || val.len() != val_labels.len() {
        return Err(Error::Dimension("bundles and labels differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut state = AdamWState::new(model.params().tensors());
    let dropout = model.config().dropout;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.lr_max, cfg.lr_min, cfg.epochs);
        let ratio = cfg.noise.ratio(epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch: Vec<FeatureBundle> = idx.iter().map(|&i| train[i].clone()).collect();
            inject_noise_batch(&mut batch, ratio, &mut rng);
            let targets: Vec<f64> = idx.iter().map(|&i| f64::from(train_labels[i])).collect();

            let mut g = Graph::new();
            let p = model.params().bind(&mut g, true);
            let mut ctx = ForwardCtx::train(dropout, &mut rng);
            let logits = batch
                .iter()
                .map(|fb| model.logit_graph(&mut g, &p, fb, &mut ctx))
                .collect::<Result<Vec<_>>>()?;
            let z = g.concat_rows(&logits)?;
            let loss = focal_loss(&mut g, z, &targets, &cfg.loss)?;
            let value = g.value(loss).values()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            g.backward(loss)?;
            let mut grads: Vec<Vec<f64>> = p
                .vars()
                .iter()
                .zip(model.params().tensors())
                .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
                .collect();
            drop(g);
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, cfg.grad_clip);
            }
            adamw_step(model.params_mut().tensors_mut(), &grads, &mut state, lr, &cfg.optimizer)?;
            if !model.params().is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += match cfg.loss.reduction {
                Reduction::Mean => value * idx.len() as f64,
                _ => value,
            };
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_auc = validation_auc(&model, val, val_labels)?;
        log::info!("epoch {epoch}: loss {train_loss:.5} val auc {val_auc:.4} lr {lr:.2e} noise {ratio:.4}");
        if !val_auc.is_nan() && best.as_ref().is_none_or(|(a, _, _)| val_auc > *a) {
            best = Some((val_auc, epoch, model.params().clone()));
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_auc,
            lr,
            noise_ratio: ratio,
        });
    }

    let seconds_per_epoch = started.elapsed().as_secs_f64() / cfg.epochs as f64;
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            *model.params_mut() = params;
            epoch
        }
        None => cfg.epochs - 1,
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        seconds_per_epoch,
    })
}
