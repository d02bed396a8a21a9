//! Self-describing JSON checkpoints and the model-kind switch.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::heads::DistributionParams;
use crate::hivae::{HivaeConfig, HivaeModel};
use crate::mae::{MaeConfig, MaeModel};
use crate::model::Imputer;
use crate::schema::{Cell, DatasetSchema, TrainStats};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Hivae,
    Mae,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Hivae => "hivae",
            ModelKind::Mae => "mae",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hivae" => Ok(ModelKind::Hivae),
            "mae" => Ok(ModelKind::Mae),
            other => Err(Error::InvalidConfig(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelConfig {
    Hivae(HivaeConfig),
    Mae(MaeConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Hivae(_) => ModelKind::Hivae,
            ModelConfig::Mae(_) => ModelKind::Mae,
        }
    }

    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Hivae => ModelConfig::Hivae(HivaeConfig::default()),
            ModelKind::Mae => ModelConfig::Mae(MaeConfig::default()),
        }
    }
}

/// Either network behind one interface.
#[derive(Debug, Clone)]
pub enum Model {
    Hivae(HivaeModel),
    Mae(MaeModel),
}

impl Model {
    pub fn new(schema: &DatasetSchema, stats: &TrainStats, config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Hivae(c) => Model::Hivae(HivaeModel::new(schema, stats, c.clone(), seed)?),
            ModelConfig::Mae(c) => Model::Mae(MaeModel::new(schema, stats, c.clone(), seed)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Hivae(_) => ModelKind::Hivae,
            Model::Mae(_) => ModelKind::Mae,
        }
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Hivae(m) => ModelConfig::Hivae(m.config.clone()),
            Model::Mae(m) => ModelConfig::Mae(m.config.clone()),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Hivae(m) => m.params(),
            Model::Mae(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Hivae(m) => m.params_mut(),
            Model::Mae(m) => m.params_mut(),
        }
    }

    pub fn stats(&self) -> &TrainStats {
        match self {
            Model::Hivae(m) => m.stats(),
            Model::Mae(m) => m.stats(),
        }
    }

    pub fn mark_trained(&mut self) {
        match self {
            Model::Hivae(m) => m.mark_trained(),
            Model::Mae(m) => m.mark_trained(),
        }
    }

    pub fn is_trained(&self) -> bool {
        match self {
            Model::Hivae(m) => m.is_trained(),
            Model::Mae(m) => m.is_trained(),
        }
    }
}

impl Imputer for Model {
    fn schema(&self) -> &DatasetSchema {
        match self {
            Model::Hivae(m) => m.schema(),
            Model::Mae(m) => m.schema(),
        }
    }

    fn predict(&self, rows: &[&[Cell]]) -> Result<Vec<Vec<DistributionParams>>> {
        match self {
            Model::Hivae(m) => m.predict(rows),
            Model::Mae(m) => m.predict(rows),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub schema_version: u64,
    pub model_kind: ModelKind,
    pub config: ModelConfig,
    /// Parameters in construction order.
    pub params: Vec<(String, NamedTensor)>,
    pub train_stats: TrainStats,
    pub schema: DatasetSchema,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let schema = model.schema().clone();
        Self {
            format_version: FORMAT_VERSION,
            schema_version: schema.version,
            model_kind: model.kind(),
            config: model.config(),
            params: model
                .params()
                .iter()
                .map(|(n, t)| (n.to_string(), NamedTensor { shape: t.shape(), values: t.data().to_vec() }))
                .collect(),
            train_stats: model.stats().clone(),
            schema,
        }
    }

    /// Rebuilds the model, validating versions and every parameter shape.
    pub fn to_model(&self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format_version {}", self.format_version)));
        }
        if self.config.kind() != self.model_kind {
            return Err(Error::Checkpoint(format!("config does not describe a {} model", self.model_kind)));
        }
        if self.schema.version != self.schema_version {
            return Err(Error::Checkpoint(format!(
                "schema_version {} disagrees with embedded schema v{}",
                self.schema_version, self.schema.version
            )));
        }
        self.train_stats.check_schema(&self.schema)?;
        let mut model = Model::new(&self.schema, &self.train_stats, &self.config, 0)?;
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            if t.shape[0] * t.shape[1] != t.values.len() {
                return Err(Error::Checkpoint(format!("parameter `{name}` has a malformed value list")));
            }
            tensors.push((name.as_str(), Tensor::from_vec(t.shape[0], t.shape[1], t.values.clone())));
        }
        model.params_mut().load_named(tensors)?;
        model.mark_trained();
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
