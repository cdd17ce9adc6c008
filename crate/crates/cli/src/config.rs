//! Sectioned TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use readmit_core::data::SplitFractions;
use readmit_core::features::PipelineConfig;
use readmit_core::model::PtConfig;
use readmit_core::synth::SynthConfig;
use readmit_core::training::TrainConfig;
use readmit_core::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub selection: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub pipeline: PipelineConfig,
    pub model: PtConfig,
    pub train: TrainConfig,
    pub split: SplitFractions,
    pub paths: Paths,
}


impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// One seed drives generation, the forest, the split and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.pipeline.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
