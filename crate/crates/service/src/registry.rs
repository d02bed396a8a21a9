//! Models bound to schema versions. Reads share `Arc`s; registration takes
//! the writer side of the lock in `AppState`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use vhgm_core::checkpoint::{Checkpoint, Model, ModelKind};
use vhgm_core::schema::{DatasetSchema, SchemaStore};

use crate::error::ApiError;

#[derive(Debug, Clone)]
pub struct Entry {
    pub model: Arc<Model>,
    pub kind: ModelKind,
    pub schema_version: u64,
    pub checkpoint_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub model_kind: ModelKind,
    pub schema_version: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Listing {
    pub default_model: Option<String>,
    pub models: Vec<ModelInfo>,
}

#[derive(Debug, Default)]
pub struct Registry {
    pub schemas: SchemaStore,
    models: BTreeMap<String, Entry>,
    default_model: Option<String>,
}

impl Registry {
    pub fn new(schemas: SchemaStore) -> Self {
        Self { schemas, ..Self::default() }
    }

    /// Loads `schemas/*.json` and `models/*.json` from a registry directory;
    /// each model is registered under its file stem.
    pub fn load_dir(dir: &Path) -> Result<Self, ApiError> {
        let mut reg = Registry::default();
        for path in sorted_json(&dir.join("schemas"))? {
            let text = std::fs::read_to_string(&path).map_err(|e| ApiError::internal(e.to_string()))?;
            reg.schemas.register(DatasetSchema::from_json(&text)?);
        }
        for path in sorted_json(&dir.join("models"))? {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let ck = Checkpoint::load(&path)?;
            reg.register(&id, &ck, Some(path))?;
        }
        Ok(reg)
    }

    /// Adds a model after checking that its schema version is known and that
    /// the schema it was trained on is the registered one.
    pub fn register(&mut self, id: &str, ck: &Checkpoint, path: Option<PathBuf>) -> Result<ModelInfo, ApiError> {
        if id.is_empty() {
            return Err(ApiError::bad_request("invalid_model_id", "model_id must not be empty"));
        }
        let known = self.schemas.get(ck.schema_version).map_err(|_| {
            ApiError::unprocessable(
                "unknown_schema_version",
                format!("checkpoint references schema version {}, which is not registered", ck.schema_version),
            )
        })?;
        if known != &ck.schema {
            return Err(ApiError::unprocessable(
                "schema_mismatch",
                format!("checkpoint schema differs from registered schema v{}", ck.schema_version),
            ));
        }
        let model = ck.to_model()?;
        let entry = Entry {
            model: Arc::new(model),
            kind: ck.model_kind,
            schema_version: ck.schema_version,
            checkpoint_path: path,
        };
        let info = info(id, &entry);
        self.models.insert(id.to_string(), entry);
        if self.default_model.is_none() {
            self.default_model = Some(id.to_string());
        }
        Ok(info)
    }

    pub fn set_default(&mut self, id: &str) -> Result<(), ApiError> {
        if !self.models.contains_key(id) {
            return Err(ApiError::not_found("unknown_model", format!("no model `{id}`")));
        }
        self.default_model = Some(id.to_string());
        Ok(())
    }

    /// Resolves a model id, falling back to the default model.
    pub fn get(&self, id: Option<&str>) -> Result<(String, Entry), ApiError> {
        let id = match id.or(self.default_model.as_deref()) {
            Some(id) => id,
            None => return Err(ApiError::not_found("unknown_model", "no model id given and no default model")),
        };
        self.models
            .get(id)
            .map(|e| (id.to_string(), e.clone()))
            .ok_or_else(|| ApiError::not_found("unknown_model", format!("no model `{id}`")))
    }

    pub fn listing(&self) -> Listing {
        Listing {
            default_model: self.default_model.clone(),
            models: self.models.iter().map(|(id, e)| info(id, e)).collect(),
        }
    }
}

fn info(id: &str, e: &Entry) -> ModelInfo {
    ModelInfo {
        model_id: id.to_string(),
        model_kind: e.kind,
        schema_version: e.schema_version,
        checkpoint_path: e.checkpoint_path.as_ref().map(|p| p.display().to_string()),
    }
}

fn sorted_json(dir: &Path) -> Result<Vec<PathBuf>, ApiError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| ApiError::internal(e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}
