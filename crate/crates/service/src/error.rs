use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dosefind::DoseError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{message}")]
    Validation { field: Option<String>, message: String },

    #[error("trial {0} not found")]
    NotFound(String),

    #[error("{message}")]
    Conflict { code: &'static str, message: String },

    #[error("missing or invalid bearer token")]
    Unauthorized,

    #[error("storage: {0}")]
    Storage(String),

    #[error("corrupt event log: {0}")]
    Corrupt(String),

    #[error("engine: {0}")]
    Engine(DoseError),
}

impl ServiceError {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        ServiceError::Validation {
            field: Some(field.into()),
            message: message.into(),
        }
    }

    /// Validation errors keep their field, nested under `scope`.
    pub fn from_dose(scope: &str, e: DoseError) -> Self {
        match e {
            DoseError::InvalidParameter { field, reason } => ServiceError::Validation {
                message: format!("{field}: {reason}"),
                field: Some(format!("{scope}.{field}")),
            },
            other => ServiceError::Engine(other),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::Validation { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict { .. } => StatusCode::CONFLICT,
            ServiceError::Unauthorized => StatusCode::UNAUTHORIZED,
            ServiceError::Storage(_) | ServiceError::Corrupt(_) | ServiceError::Engine(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Validation { .. } => "validation_error",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict { code, .. } => code,
            ServiceError::Unauthorized => "unauthorized",
            ServiceError::Storage(_) => "storage_error",
            ServiceError::Corrupt(_) => "corrupt_log",
            ServiceError::Engine(_) => "engine_error",
        }
    }
}

/// Wire format of every error response.
#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        if self.status().is_server_error() {
            log::error!("{self}");
        }
        let body = ErrorBody {
            code: self.code(),
            message: self.to_string(),
            field: match &self {
                ServiceError::Validation { field, .. } => field.clone(),
                _ => None,
            },
        };
        (self.status(), Json(body)).into_response()
    }
}
