//! Run configuration. Layers merge as JSON: built-in defaults, then the
//! config file, then command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use vhgm_core::checkpoint::{ModelConfig, ModelKind};
use vhgm_core::hivae::HivaeConfig;
use vhgm_core::mae::MaeConfig;
use vhgm_core::train::TrainConfig;

use crate::CliError;

pub const RUN_FORMAT_VERSION: u32 = 1;

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Recursively overlays `top` onto `base`; objects merge key by key,
/// anything else is replaced.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

pub fn defaults(kind: ModelKind) -> Value {
    let model = ModelConfig::default_for(kind);
    let train = TrainConfig::default_for(&model);
    json!({ "model": model, "train": train })
}

pub fn read_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("config {} is not valid JSON: {e}", path.display())))?;
    if let Some(obj) = v.as_object() {
        if let Some(bad) =
            obj.keys().find(|k| !matches!(k.as_str(), "model" | "train" | "model_kind" | "format_version"))
        {
            return Err(CliError::validation(format!("config {}: unknown section `{bad}`", path.display())));
        }
        Ok(v)
    } else {
        Err(CliError::validation(format!("config {} must be a JSON object", path.display())))
    }
}

/// Resolves the layered configuration for `kind`.
pub fn resolve(kind: ModelKind, file: Option<Value>, flags: Map<String, Value>) -> Result<RunConfig, CliError> {
    let mut v = defaults(kind);
    if let Some(mut f) = file {
        if let Some(k) = f.as_object_mut().and_then(|o| o.remove("model_kind")) {
            if k != json!(kind.as_str()) {
                return Err(CliError::validation(format!("config is for model kind {k}, not {kind}")));
            }
        }
        if let Some(o) = f.as_object_mut() {
            o.remove("format_version");
        }
        merge(&mut v, f);
    }
    merge(&mut v, json!({ "train": Value::Object(flags) }));
    let invalid = |what: &str, e: serde_json::Error| CliError::validation(format!("{what} config: {e}"));
    let model = match kind {
        ModelKind::Hivae => ModelConfig::Hivae(strict::<HivaeConfig>(&v["model"]).map_err(|e| invalid("model", e))?),
        ModelKind::Mae => ModelConfig::Mae(strict::<MaeConfig>(&v["model"]).map_err(|e| invalid("model", e))?),
    };
    let train: TrainConfig = strict(&v["train"]).map_err(|e| invalid("train", e))?;
    train.validate()?;
    Ok(RunConfig { format_version: RUN_FORMAT_VERSION, model_kind: kind, model, train })
}

/// Deserializes and rejects keys the target type would silently drop.
fn strict<T: Serialize + for<'de> Deserialize<'de>>(v: &Value) -> Result<T, serde_json::Error> {
    let parsed: T = serde_json::from_value(v.clone())?;
    let back = serde_json::to_value(&parsed)?;
    if let (Some(given), Some(known)) = (v.as_object(), back.as_object()) {
        if let Some(k) = given.keys().find(|k| !known.contains_key(*k)) {
            return Err(serde::de::Error::custom(format!("unknown field `{k}`")));
        }
    }
    Ok(parsed)
}
