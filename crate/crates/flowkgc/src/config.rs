//! TOML run configuration: file values under command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

/// Environment variable that overrides every `--out` directory.
pub const OUT_DIR_ENV: &str = "FLOWKGC_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("cannot write config: {0}")]
    Write(#[from] std::io::Error),
}

/// Top-level config file; every section is optional and defaults apply.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

pub fn load(path: Option<&Path>) -> Result<FileConfig, ConfigError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

/// Echo the fully resolved configuration into the output directory.
pub fn write_resolved(dir: &Path, cfg: &FileConfig) -> Result<(), ConfigError> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(cfg).expect("config serializes");
    fs::write(dir.join("resolved-config.toml"), text)?;
    Ok(())
}

/// Output directory: the environment override wins over the flag.
pub fn resolve_out_dir(flag: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag.to_path_buf(),
    }
}
