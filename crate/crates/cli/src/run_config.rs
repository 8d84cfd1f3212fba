use std::path::Path;

use dgtn::config_text::{apply_entries, parse_entries};
use dgtn::model::ModelConfig;
use dgtn::train::TrainConfig;
use dgtn::Result;

/// Model and training settings from a `key = value` file; flags are applied on top.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rc = RunConfig::default();
        apply_entries(&parse_entries(text)?, &mut [&mut rc.model, &mut rc.train])?;
        Ok(rc)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::parse(&std::fs::read_to_string(p)?),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
