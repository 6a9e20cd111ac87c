//! Run configuration: a JSON file with `model` and `train` sections, then
//! `--set key=value` overrides, then `--seed`.

use std::path::Path;

use ldn_core::model::ModelConfig;
use ldn_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Parses one `key=value` override. The value is read as JSON when it parses
/// and as a plain string otherwise, so `train.task=parity` works unquoted.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Input(format!("override {raw:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Input(format!("override {raw:?} has an empty key segment")));
    }
    let value = value.trim();
    let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((path, parsed))
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<(), CliError> {
    let mut node = root;
    for (i, seg) in path.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::Input(format!(
                "cannot set {}: {} is not an object",
                path.join("."),
                path[..i].join(".")
            ))
        })?;
        if i + 1 == path.len() {
            obj.insert(seg.clone(), value);
            return Ok(());
        }
        node = obj.entry(seg.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

fn has_key(root: &Value, section: &str, key: &str) -> bool {
    root.get(section).and_then(|s| s.get(key)).is_some()
}

/// Builds the configuration from an optional file plus overrides. Model
/// `vocab_size` and `num_classes` follow the task unless given explicitly.
pub fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<CliConfig, CliError> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !root.is_object() {
        return Err(CliError::Input("config must be a JSON object".into()));
    }
    for raw in overrides {
        let (key, value) = parse_override(raw)?;
        set_path(&mut root, &key, value)?;
    }
    let explicit_vocab = has_key(&root, "model", "vocab_size");
    let explicit_classes = has_key(&root, "model", "num_classes");

    let mut cfg: CliConfig = serde_json::from_value(root).map_err(|e| CliError::Input(format!("config: {e}")))?;
    if !explicit_vocab {
        cfg.model.vocab_size = cfg.train.task.vocab_size();
    }
    if !explicit_classes {
        cfg.model.num_classes = cfg.train.task.num_classes();
    }
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}
