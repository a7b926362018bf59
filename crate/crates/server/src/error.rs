use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use expenseflow::evaluation::EvalError;
use expenseflow::{PipelineError, PolicyError};

/// Error body returned by every endpoint. `code` is machine-readable and
/// drawn from a closed set; internals never leak into `message` for 500s.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub status: u16,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            message: message.into(),
            status: status.as_u16(),
        }
    }

    pub fn invalid_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }

    pub fn internal() -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "internal error")
    }

    fn from_code(code: &'static str, message: String) -> Self {
        let status = status_for(code);
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!(code, %message, "request failed");
            return Self::new(status, code, "internal error; see server log");
        }
        Self::new(status, code, message)
    }
}

pub fn status_for(code: &str) -> StatusCode {
    match code {
        "report_not_found" | "task_not_found" => StatusCode::NOT_FOUND,
        "duplicate_report" | "already_decided" | "duplicate_task_for_report" | "terminal_state" | "awaiting_review" => {
            StatusCode::CONFLICT
        }
        "bad_request" => StatusCode::BAD_REQUEST,
        "io_failure" | "corrupt_log" | "internal" => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        Self::from_code(e.code(), e.to_string())
    }
}

impl From<PolicyError> for ApiError {
    fn from(e: PolicyError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        match e {
            // A missing or unreadable labels file is the caller's input problem.
            EvalError::Io { .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_labels", e.to_string()),
            other => Self::from_code(other.code(), other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}
