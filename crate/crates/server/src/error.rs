use axum::extract::rejection::JsonRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use arena_core::{ArenaError, PipelineError};

/// JSON error body: `{"code": "...", "message": "..."}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "validation_error", message)
    }

    pub fn unknown_track(name: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_track", format!("unknown track {name:?}"))
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        match e {
            PipelineError::Invalid(_) => Self::validation(msg),
            PipelineError::QueueFull(_) => Self::new(StatusCode::SERVICE_UNAVAILABLE, "backpressure", msg),
            PipelineError::Ingest(_) | PipelineError::Stopped => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", msg)
            }
            PipelineError::Replay(_) | PipelineError::Sequence(_) => Self::internal(msg),
        }
    }
}

impl From<ArenaError> for ApiError {
    fn from(e: ArenaError) -> Self {
        let msg = e.to_string();
        match e {
            ArenaError::Validation(_) => Self::validation(msg),
            ArenaError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "not_found", msg),
            ArenaError::Conflict(_) => Self::new(StatusCode::CONFLICT, "conflict", msg),
            ArenaError::NotReady { .. } => Self::new(StatusCode::CONFLICT, "track_not_ready", msg),
            ArenaError::Pipeline(p) => p.into(),
            ArenaError::Provider(_) => Self::new(StatusCode::BAD_GATEWAY, "provider_error", msg),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_body", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}
