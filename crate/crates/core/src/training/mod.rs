//! Loss, optimization, noise schedules, the training loop and K-fold ensembles.

pub mod kfold;
pub mod loss;
pub mod noise;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use kfold::{ensemble_predict, kfold_train, kfold_train_with, Ensemble, KFoldOutcome};
pub use loss::{focal_loss, focal_loss_scalar, label_smooth, LossConfig, Reduction};
pub use noise::{inject_noise, inject_noise_batch};
pub use optim::{adamw_step, clip_grad_norm, AdamWConfig, AdamWState};
pub use schedule::{cosine_lr, noise_ratio_linear, noise_ratio_sinusoidal, NoiseSchedule};
pub use trainer::{train, write_history_csv, EpochStats, TrainConfig, TrainOutcome};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::Predictor;
use crate::features::FeaturePipeline;
use crate::model::{ModalityDims, ModelArtifact, PtConfig, PtModel};

impl Predictor for ModelArtifact {
    fn predict(&self, ds: &Dataset) -> Result<Vec<f64>> {
        self.pipeline.check_compatible(ds)?;
        self.model.predict_proba_many(&self.pipeline.bundle_all(ds)?)
    }

    fn parameter_count(&self) -> usize {
        self.model.count_parameters()
    }

    fn fingerprint(&self) -> String {
        ModelArtifact::fingerprint(self)
    }
}

/// Builds a model sized for `pipeline`, seeded with `train_cfg.seed`, and
/// trains it on the bundled records of `train_ds`, selecting on `val_ds`.
pub fn train_model(
    pipeline: FeaturePipeline,
    train_ds: &Dataset,
    val_ds: &Dataset,
    model_cfg: &PtConfig,
    train_cfg: &TrainConfig,
) -> Result<(ModelArtifact, TrainOutcome)> {
    if train_ds.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let cfg = PtConfig {
        k_ehr: pipeline.ehr_dim(),
        ..model_cfg.clone()
    };
    let dims = ModalityDims {
        ehr: pipeline.ehr_dim(),
        cxr: crate::data::FEATURE_VECTOR_DIM,
        notes: pipeline.notes_dim(),
    };
    let model = PtModel::new(cfg, dims, train_cfg.seed)?;
    let train_fb = pipeline.bundle_all(train_ds)?;
    let val_fb = pipeline.bundle_all(val_ds)?;
    let outcome = train(model, &train_fb, &train_ds.labels(), &val_fb, &val_ds.labels(), train_cfg)?;
    let artifact = ModelArtifact {
        model: outcome.model.clone(),
        pipeline,
    };
    Ok((artifact, outcome))
}
