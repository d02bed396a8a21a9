//! HTTP front end: deterministic and latent-sampling prediction, schema
//! lookup, and a model registry keyed by id.

pub mod error;
pub mod registry;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use vhgm_core::checkpoint::{Checkpoint, Model};
use vhgm_core::heads::DistributionParams;
use vhgm_core::model::Imputer;
use vhgm_core::schema::{Cell, DatasetSchema, SchemaStore};

pub use error::{ApiError, ErrorBody};
pub use registry::{Listing, ModelInfo, Registry};

pub const MAX_BODY_BYTES: usize = 1 << 20;
pub const DEFAULT_MAX_SAMPLING_N: usize = 1000;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub registry_dir: Option<PathBuf>,
    pub default_model: Option<String>,
    pub max_sampling_n: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            registry_dir: None,
            default_model: None,
            max_sampling_n: DEFAULT_MAX_SAMPLING_N,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    registry: Arc<RwLock<Registry>>,
    registry_dir: Option<PathBuf>,
    max_sampling_n: usize,
}

impl AppState {
    pub fn new(registry: Registry, max_sampling_n: usize) -> Self {
        Self { registry: Arc::new(RwLock::new(registry)), registry_dir: None, max_sampling_n }
    }

    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, ApiError> {
        let mut reg = match &cfg.registry_dir {
            Some(dir) => Registry::load_dir(dir)?,
            None => Registry::new(SchemaStore::new()),
        };
        if let Some(id) = &cfg.default_model {
            reg.set_default(id)?;
        }
        let mut state = Self::new(reg, cfg.max_sampling_n);
        state.registry_dir = cfg.registry_dir.clone();
        Ok(state)
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Registry> {
        self.registry.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Registry> {
        self.registry.write().unwrap_or_else(|p| p.into_inner())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    #[serde(default)]
    pub model_id: Option<String>,
    /// Attribute id to raw value; absent or null means missing.
    #[serde(default)]
    pub inputs: Map<String, Value>,
    #[serde(default)]
    pub sampling_n: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Schema version the client built its inputs against.
    #[serde(default)]
    pub schema_version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributePrediction {
    pub id: String,
    pub params: DistributionParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub point_estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub model_id: String,
    pub schema_version: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<AttributePrediction>>,
    /// One parameter set per latent sample.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<Vec<AttributePrediction>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterRequest {
    pub model_id: String,
    /// Checkpoint file, relative paths resolved against the registry dir.
    #[serde(default)]
    pub checkpoint_path: Option<String>,
    #[serde(default)]
    pub checkpoint: Option<Box<Checkpoint>>,
    #[serde(default)]
    pub make_default: bool,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/predict", post(predict))
        .route("/v1/schema/{version}", get(schema))
        .route("/v1/models", get(list_models).post(register_model))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

pub async fn serve(cfg: ServiceConfig) -> std::io::Result<()> {
    let state = AppState::from_config(&cfg).map_err(|e| std::io::Error::other(e.body.message))?;
    let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn healthz() -> Json<Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

fn parse_body<T: DeserializeOwned>(body: Result<Bytes, BytesRejection>) -> Result<T, ApiError> {
    let bytes = body.map_err(|e| {
        let status = e.status();
        let code = if status == StatusCode::PAYLOAD_TOO_LARGE { "payload_too_large" } else { "unreadable_body" };
        ApiError::new(status, code, e.body_text())
    })?;
    serde_json::from_slice(&bytes).map_err(|e| ApiError::bad_request("malformed_json", e.to_string()))
}

/// Builds the row in schema order, rejecting unknown ids and ill-typed values.
pub fn build_row(schema: &DatasetSchema, inputs: &Map<String, Value>) -> Result<Vec<Cell>, ApiError> {
    let mut row = vec![None; schema.len()];
    for (id, value) in inputs {
        let j = schema.index_of(id).ok_or_else(|| {
            ApiError::bad_request("unknown_attribute", format!("attribute `{id}` is not in schema v{}", schema.version))
                .for_attribute(id)
        })?;
        let x = match value {
            Value::Null => continue,
            Value::Number(n) => n.as_f64(),
            _ => None,
        };
        let x = x.ok_or_else(|| {
            ApiError::bad_request("type_mismatch", format!("attribute `{id}` needs a number, got {value}"))
                .for_attribute(id)
        })?;
        schema.attributes[j]
            .var_type
            .check(x)
            .map_err(|m| ApiError::bad_request("type_mismatch", format!("attribute `{id}`: {m}")).for_attribute(id))?;
        row[j] = Some(x);
    }
    Ok(row)
}

fn attributes(schema: &DatasetSchema, params: Vec<DistributionParams>, with_point: bool) -> Vec<AttributePrediction> {
    schema
        .attributes
        .iter()
        .zip(params)
        .map(|(a, p)| AttributePrediction { id: a.id.clone(), point_estimate: with_point.then(|| p.mode()), params: p })
        .collect()
}

/// Runs one prediction request against the registry; shared by the HTTP
/// handler and in-process callers.
pub fn run_predict(state: &AppState, req: &PredictRequest) -> Result<PredictResponse, ApiError> {
    let (model_id, entry) = state.read().get(req.model_id.as_deref())?;
    let model = entry.model;
    let schema = model.schema();
    if let Some(v) = req.schema_version {
        if v != schema.version {
            return Err(ApiError::unprocessable(
                "schema_version_conflict",
                format!("request targets schema v{v}, model `{model_id}` serves v{}", schema.version),
            ));
        }
    }
    let row = build_row(schema, &req.inputs)?;
    let (attributes_out, samples) = match req.sampling_n {
        None => {
            let gamma = model.predict(&[&row])?.remove(0);
            (Some(attributes(schema, gamma, true)), None)
        }
        Some(n) => {
            if n == 0 || n > state.max_sampling_n {
                return Err(ApiError::bad_request(
                    "sampling_n_out_of_range",
                    format!("sampling_n must lie in 1..={}, got {n}", state.max_sampling_n),
                ));
            }
            let Model::Hivae(h) = &*model else {
                return Err(vhgm_core::Error::SamplingUnsupported.into());
            };
            let mut rng = ChaCha8Rng::seed_from_u64(req.seed.unwrap_or(0));
            let sets = h.impute(&row, n, &mut rng)?;
            (None, Some(sets.into_iter().map(|g| attributes(schema, g, false)).collect()))
        }
    };
    Ok(PredictResponse { model_id, schema_version: schema.version, attributes: attributes_out, samples })
}

async fn predict(State(state): State<AppState>, body: Result<Bytes, BytesRejection>) -> Response {
    let started = Instant::now();
    let req: PredictRequest = match parse_body(body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    let result = tokio::task::spawn_blocking(move || run_predict(&state, &req))
        .await
        .unwrap_or_else(|e| Err(ApiError::internal(e.to_string())));
    let mut resp = match result {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    };
    // Timing rides in a header so identical requests give identical bodies.
    let timing = format!("predict;dur={:.3}", started.elapsed().as_secs_f64() * 1e3);
    if let Ok(v) = HeaderValue::from_str(&timing) {
        resp.headers_mut().insert(header::HeaderName::from_static("server-timing"), v);
    }
    resp
}

async fn schema(
    State(state): State<AppState>,
    UrlPath(version): UrlPath<String>,
) -> Result<Json<DatasetSchema>, ApiError> {
    let v: u64 = version
        .trim_start_matches('v')
        .parse()
        .map_err(|_| ApiError::bad_request("invalid_version", format!("`{version}` is not a schema version")))?;
    let reg = state.read();
    let s = reg
        .schemas
        .get(v)
        .map_err(|_| ApiError::not_found("unknown_schema_version", format!("schema v{v} is not registered")))?;
    Ok(Json(s.clone()))
}

async fn list_models(State(state): State<AppState>) -> Json<Listing> {
    Json(state.read().listing())
}

fn resolve(dir: Option<&Path>, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    match dir {
        Some(d) if p.is_relative() => d.join(p),
        _ => p,
    }
}

async fn register_model(
    State(state): State<AppState>,
    body: Result<Bytes, BytesRejection>,
) -> Result<(StatusCode, Json<ModelInfo>), ApiError> {
    let req: RegisterRequest = parse_body(body)?;
    let (ck, path) = match (req.checkpoint, req.checkpoint_path) {
        (Some(ck), None) => (*ck, None),
        (None, Some(p)) => {
            let path = resolve(state.registry_dir.as_deref(), &p);
            let ck =
                Checkpoint::load(&path).map_err(|e| ApiError::unprocessable("checkpoint_rejected", e.to_string()))?;
            (ck, Some(path))
        }
        _ => {
            return Err(ApiError::bad_request(
                "invalid_registration",
                "give exactly one of checkpoint or checkpoint_path",
            ))
        }
    };
    let mut reg = state.write();
    let info = reg.register(&req.model_id, &ck, path)?;
    if req.make_default {
        reg.set_default(&req.model_id)?;
    }
    tracing::info!(model = %info.model_id, kind = %info.model_kind, schema = info.schema_version, "registered");
    Ok((StatusCode::CREATED, Json(info)))
}
