use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

/// Wire form of every error the service returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attribute_id: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into(), attribute_id: None } }
    }

    pub fn for_attribute(mut self, id: impl Into<String>) -> Self {
        self.body.attribute_id = Some(id.into());
        self
    }

    pub fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn not_found(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn unprocessable(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<vhgm_core::Error> for ApiError {
    fn from(e: vhgm_core::Error) -> Self {
        use vhgm_core::Error as E;
        match e {
            E::SamplingUnsupported => Self::new(StatusCode::CONFLICT, "sampling_unsupported", e.to_string()),
            E::AttributeNotInSchema(ref id) => {
                let id = id.clone();
                Self::bad_request("unknown_attribute", e.to_string()).for_attribute(id)
            }
            E::TypeMismatch { ref attribute, .. } => {
                let id = attribute.clone();
                Self::bad_request("type_mismatch", e.to_string()).for_attribute(id)
            }
            E::UnknownSchemaVersion(_) | E::StatsSchemaMismatch(_) | E::Checkpoint(_) | E::ShapeMismatch(_) => {
                Self::unprocessable("checkpoint_rejected", e.to_string())
            }
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
