use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),

    #[error("unknown dataset {0}")]
    UnknownDataset(String),

    #[error("task {task_id} submitted while the cursor is at {cursor}")]
    OutOfOrder { task_id: usize, cursor: usize },

    #[error("task {task_id} already carries a different label")]
    Conflict { task_id: usize, cursor: usize },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid request: {0}")]
    Invalid(String),

    #[error("corrupt session log {0}")]
    Corrupt(String),

    #[error(transparent)]
    Core(#[from] pointsup::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type ServiceResult<T> = Result<T, ServiceError>;

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownSession(_) => "unknown_session",
            ServiceError::UnknownDataset(_) => "unknown_dataset",
            ServiceError::OutOfOrder { .. } => "out_of_order",
            ServiceError::Conflict { .. } => "conflicting_label",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Invalid(_) => "invalid_request",
            ServiceError::Corrupt(_) | ServiceError::Core(_) | ServiceError::Io(_) | ServiceError::Json(_) => {
                "internal"
            }
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownSession(_) | ServiceError::UnknownDataset(_) | ServiceError::NotFound(_) => {
                StatusCode::NOT_FOUND
            }
            ServiceError::OutOfOrder { .. } | ServiceError::Conflict { .. } => StatusCode::CONFLICT,
            ServiceError::Invalid(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code(), "message": self.to_string() });
        if let ServiceError::OutOfOrder { cursor, .. } | ServiceError::Conflict { cursor, .. } = self {
            body["cursor"] = json!(cursor);
        }
        (self.status(), Json(body)).into_response()
    }
}
