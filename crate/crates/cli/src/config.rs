//! Run configuration files and `--override key=value` handling.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use aligned_sae::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// A malformed command line or configuration; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// One training run: where the data lives, where outputs go, and how to train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Free-form label copied into sweep outputs.
    #[serde(default)]
    pub name: String,
    /// SAEA activation file.
    pub data: PathBuf,
    /// Receives `checkpoint.saec` and `metrics.jsonl`.
    pub out_dir: PathBuf,
    /// Seeds used by `sweep` when `--seeds` is not given.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Reads `path`, applies `overrides` in order and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = if overrides.is_empty() {
            serde_json::from_str::<RunConfig>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        } else {
            let mut doc: Value =
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            for o in overrides {
                apply_override(&mut doc, o)?;
            }
            serde_json::from_value::<RunConfig>(doc)
                .map_err(|e| usage(format!("{} after overrides: {e}", path.display())))?
        };
        cfg.train
            .validate()
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}

/// Sets a dotted key such as `train.lambda=0.05` in a JSON document.
///
/// The value is read as JSON when it parses (numbers, booleans, objects) and
/// as a bare string otherwise, so `train.variant.encoder=aligned` works
/// without quoting.
pub fn apply_override(doc: &mut Value, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(usage(format!("override {spec:?} has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let Value::Object(map) = node else {
            return Err(usage(format!("override {key}: {part:?} is inside a non-object value")));
        };
        if parts.peek().is_none() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one segment")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const BASE: &str = r#"{
        "name": "toy",
        "data": "toy.saea",
        "out_dir": "runs/toy",
        "train": {"variant": {"encoder": "standard"}, "n": 2, "m": 1, "lambda": 0.0, "total_steps": 10,
                  "lr_warmup_steps": 1, "lambda_warmup_steps": 1, "batch_size": 1}
    }"#;

    #[test]
    fn overrides_set_nested_keys() {
        let mut doc: Value = serde_json::from_str(BASE).unwrap();
        apply_override(&mut doc, "train.lambda=0.05").unwrap();
        apply_override(&mut doc, "train.variant.encoder=aligned").unwrap();
        apply_override(&mut doc, r#"train.variant.activation={"kind":"topk","k":1}"#).unwrap();
        assert_eq!(doc["train"]["lambda"], json!(0.05));
        assert_eq!(doc["train"]["variant"]["encoder"], json!("aligned"));
        assert_eq!(doc["train"]["variant"]["activation"]["k"], json!(1));
        assert!(apply_override(&mut doc, "train.lambda").is_err());
        assert!(apply_override(&mut doc, "train..x=1").is_err());
        assert!(apply_override(&mut doc, "name.x=1").is_err());
    }

    #[test]
    fn reserialization_is_idempotent() {
        let cfg: RunConfig = serde_json::from_str(BASE).unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let again: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(serde_json::to_string_pretty(&again).unwrap(), text);
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let bad = BASE.replace("\"lambda\"", "\"lamda\"");
        let err = serde_json::from_str::<RunConfig>(&bad).unwrap_err();
        assert!(err.line() > 0);
        assert!(err.to_string().contains("lamda"));
    }
}
