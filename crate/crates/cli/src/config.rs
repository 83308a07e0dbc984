//! Structured-text configuration files (TOML) with a schema-version field.
//! Unknown keys are rejected everywhere.

use std::path::Path;

use mmpref::backbone::ModelConfig;
use mmpref::reward_head::HeadKind;
use mmpref::training::TrainConfig;
use mmpref::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_head")]
    pub head: HeadKind,
}

fn default_head() -> HeadKind {
    HeadKind::SkipCa
}

impl Default for TrainFile {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            head: default_head(),
        }
    }
}

impl TrainFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: TrainFile = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if file.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema version {}",
                file.schema_version
            )));
        }
        file.model.validate()?;
        file.train.validate()?;
        Ok(file)
    }
}

/// Loads a corpus spec TOML (the full `CorpusSpec` key set).
pub fn load_corpus_spec(path: &Path) -> Result<mmpref::data::CorpusSpec> {
    let text = std::fs::read_to_string(path)?;
    let spec: mmpref::data::CorpusSpec =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}
