use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splatlens::train::TrainConfig;

use crate::error::{ServiceError, ServiceResult};

pub const CONFIG_ENV: &str = "SPLATLENS_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub addr: String,
    /// Scene directory loaded at startup.
    pub scene: Option<PathBuf>,
    /// Model directory (`model.json` + `model.ckpt`).
    pub model: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            addr: "127.0.0.1:8080".into(),
            scene: None,
            model: None,
        }
    }
}

/// Contents of the config file. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplatlensConfig {
    pub train: TrainConfig,
    pub serve: ServeConfig,
}

impl SplatlensConfig {
    pub fn load(path: &Path) -> ServiceResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| ServiceError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| ServiceError::new("config", format!("{}: {e}", path.display())))
    }

    /// The file given by `flag`, else by `SPLATLENS_CONFIG`, else defaults.
    pub fn resolve(flag: Option<&Path>) -> ServiceResult<Self> {
        match flag {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }
}
