//! Note vectorization, forest-based EHR selection and record bundling.

pub mod forest;
pub mod pipeline;
pub mod selection;
pub mod tfidf;

pub use forest::{feature_importances, gini, train_random_forest, Forest};
pub use pipeline::{FeatureBundle, FeaturePipeline, Modality, PipelineConfig, Sequence, SequenceCaps};
pub use selection::{apply_selection, patient_mean_features, select_top_k, FeatureSelection};
pub use tfidf::{tokenize, TfidfModel};
