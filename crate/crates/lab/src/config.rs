//! TOML run configuration: an optional top-level `seed` plus `[model]`,
//! `[task]` and `[train]` tables. Missing keys keep their defaults;
//! unknown keys are rejected.

use std::fs;
use std::path::Path;

use gatera_core::trainer::RunConfig;

use crate::error::{LabError, Result};

/// A parsed file and whether it named a seed explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct FileConfig {
    pub config: RunConfig,
    pub sets_seed: bool,
}

pub fn parse(text: &str) -> Result<FileConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
    let sets_seed = table.contains_key("seed");
    let config = table
        .try_into()
        .map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
    Ok(FileConfig { config, sets_seed })
}

pub fn to_toml(config: &RunConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| LabError::Config(e.to_string()))
}

pub fn load(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse(&text).map_err(|e| match e {
        LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save(config: &RunConfig, path: &Path) -> Result<()> {
    fs::write(path, to_toml(config)?).map_err(|e| LabError::io(path, e))
}
