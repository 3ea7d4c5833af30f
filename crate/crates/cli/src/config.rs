//! Run configuration: JSON file merged over defaults, then `--set` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use unist_core::model::{ModelConfig, Variant};
use unist_core::training::{SplitSpec, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
        }
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, anything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(CliError::Config(format!(
                "override `{key}`: `{}` is not a section",
                parts[..i].join(".")
            )));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .get_mut(*part)
            .ok_or_else(|| CliError::Config(format!("override `{key}`: unknown section `{part}`")))?;
    }
    unreachable!("loop returns on the last part")
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut root = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if !patch.is_object() {
                return Err(CliError::Config(format!("{}: config must be a JSON object", path.display())));
            }
            merge(&mut root, patch);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        if let Some(seed) = seed {
            root["train"]["seed"] = Value::from(seed);
        }
        let config: RunConfig = serde_json::from_value(root).map_err(|e| CliError::Config(e.to_string()))?;
        config.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        config.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }
}
