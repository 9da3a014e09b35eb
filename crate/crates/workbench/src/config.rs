//! Training configuration files: TOML mirroring `TrainConfig`, missing keys
//! take the defaults.

use std::fs;
use std::path::{Path, PathBuf};

use geofuse_nn::trainer::TrainConfig;
use serde::de::{DeserializeOwned, IntoDeserializer};

use crate::error::{Result, WorkbenchError};

pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text).map_err(|e| WorkbenchError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| WorkbenchError::Config(format!("{}: {e}", path.display())))?;
    parse_train_config(&text).map_err(|e| WorkbenchError::Config(format!("{}: {e}", path.display())))
}

pub fn write_train_config(path: &Path, cfg: &TrainConfig) -> Result<()> {
    let text = toml::to_string(cfg).map_err(|e| WorkbenchError::Config(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

/// Where `train` puts the config a checkpoint was trained with.
pub fn sidecar_config_path(ckpt: &Path) -> PathBuf {
    with_suffix(ckpt, ".config.toml")
}

pub fn log_path(ckpt: &Path) -> PathBuf {
    with_suffix(ckpt, ".log.csv")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Parses a lowercase enum value such as `fov` or `late` the way the config
/// file spells it.
pub fn parse_choice<T: DeserializeOwned>(value: &str) -> Result<T> {
    T::deserialize(value.into_deserializer())
        .map_err(|e: serde::de::value::Error| WorkbenchError::Config(format!("{value:?}: {e}")))
}
