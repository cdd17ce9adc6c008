//! Multimodal transformer readmission predictor.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
