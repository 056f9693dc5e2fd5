//! Flat TOML run configuration with command-line overrides.

use std::path::Path;

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Parses `key=value`; the value is read as a TOML literal, or as a bare
/// string when that fails (so `experts=Id+Ad` works unquoted).
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {text:?} is not of the form key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key present"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key, value))
}

fn check_keys(table: &Table) -> Result<()> {
    for key in table.keys() {
        if !TrainConfig::KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "unknown config key {key:?}; valid keys: {}",
                TrainConfig::KEYS.join(", ")
            )));
        }
    }
    Ok(())
}

/// Builds a config from optional file text plus overrides applied in order.
pub fn config_from_parts(file_text: Option<&str>, overrides: &[String]) -> Result<TrainConfig> {
    let mut table = match file_text {
        Some(text) => text
            .parse::<Table>()
            .map_err(|e| Error::Config(format!("config file is not valid TOML: {e}")))?,
        None => Table::new(),
    };
    check_keys(&table)?;
    for o in overrides {
        let (key, value) = parse_override(o)?;
        table.insert(key, value);
    }
    check_keys(&table)?;
    let cfg: TrainConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p.display(), e))?),
        None => None,
    };
    config_from_parts(text.as_deref(), overrides)
}

/// Every field written out, suitable for editing and reloading.
pub fn render_config(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).expect("train config serialises")
}
