use std::path::PathBuf;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

use crate::wire::SCHEMA_VERSION;

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] pilesort_core::Error),

    #[error("{0}")]
    BadRequest(String),

    #[error("{0}")]
    Conflict(String),

    #[error("unknown {kind} `{id}`")]
    NotFound { kind: &'static str, id: String },

    #[error("cannot read image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),
}

impl ServiceError {
    pub fn not_found(kind: &'static str, id: impl Into<String>) -> Self {
        ServiceError::NotFound { kind, id: id.into() }
    }

    pub fn status(&self) -> StatusCode {
        use pilesort_core::Error as E;
        match self {
            ServiceError::NotFound { .. } | ServiceError::Core(E::NotFound { .. }) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) | ServiceError::Core(E::Precondition(_)) => StatusCode::CONFLICT,
            ServiceError::BadRequest(_)
            | ServiceError::Image { .. }
            | ServiceError::Core(E::InvalidInput(_) | E::DimensionMismatch { .. } | E::Parse { .. } | E::Json(_)) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!("{self}");
        }
        let body = json!({ "schema_version": SCHEMA_VERSION, "error": self.to_string() });
        (status, Json(body)).into_response()
    }
}
