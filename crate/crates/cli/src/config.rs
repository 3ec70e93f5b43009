//! Loading JSON config files. Failures here exit with code 2.

use std::fmt;
use std::path::Path;

use ecn_core::dataset::{SplitConfig, SynthConfig, Vocab};
use ecn_core::model::ModelConfig;
use ecn_core::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde_json::Value;

/// A config file that could not be read, parsed or validated.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(path: &Path, message: impl fmt::Display) -> anyhow::Error {
    ConfigError(format!("{}: {message}", path.display())).into()
}

fn read_value(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(path, e))?;
    serde_json::from_str(&text).map_err(|e| invalid(path, e))
}

fn parse<T: DeserializeOwned>(path: &Path, value: Value) -> anyhow::Result<T> {
    serde_json::from_value(value).map_err(|e| invalid(path, e))
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        Some(p) => parse(p, read_value(p)?),
        None => Ok(T::default()),
    }
}

pub fn synth(path: Option<&Path>) -> anyhow::Result<SynthConfig> {
    let cfg: SynthConfig = load_or_default(path)?;
    cfg.validate().map_err(|e| invalid(path.unwrap_or(Path::new("<default>")), e))?;
    Ok(cfg)
}

pub fn split(path: Option<&Path>) -> anyhow::Result<SplitConfig> {
    let cfg: SplitConfig = load_or_default(path)?;
    cfg.validate().map_err(|e| invalid(path.unwrap_or(Path::new("<default>")), e))?;
    Ok(cfg)
}

pub fn train(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    let cfg: TrainConfig = load_or_default(path)?;
    cfg.validate().map_err(|e| invalid(path.unwrap_or(Path::new("<default>")), e))?;
    Ok(cfg)
}

/// A model config whose `vocab` defaults to the data's when the file omits it.
pub fn model(path: Option<&Path>, data: Vocab) -> anyhow::Result<ModelConfig> {
    let cfg = match path {
        Some(p) => {
            let mut value = read_value(p)?;
            if let Value::Object(map) = &mut value {
                if !map.contains_key("vocab") {
                    map.insert("vocab".into(), serde_json::to_value(data)?);
                }
            }
            parse(p, value)?
        }
        None => ModelConfig::for_vocab(data),
    };
    cfg.validate().map_err(|e| invalid(path.unwrap_or(Path::new("<default>")), e))?;
    Ok(cfg)
}
