use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use ask_core::bibliography::BibliographyError;
use ask_core::feedback::FeedbackError;
use ask_core::pipeline::StageError;
use ask_core::vectorstore::FilterError;

/// Error body of every failed request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub stage: String,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, stage: &str, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                stage: stage.into(),
                code: code.into(),
                message: message.into(),
                position: None,
            },
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "request", "validation_error", message)
    }

    pub fn not_found(stage: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, stage, "not_found", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "internal_error", message)
    }
}

/// Status class for a machine-readable error code.
pub fn status_for(code: &str) -> StatusCode {
    match code {
        "validation_error" | "filter_error" | "filter_syntax" | "invalid_input" | "out_of_range"
        | "unsupported_format" | "parse_error" => StatusCode::BAD_REQUEST,
        "not_found" => StatusCode::NOT_FOUND,
        "rate_limited" => StatusCode::TOO_MANY_REQUESTS,
        "provider_error" => StatusCode::BAD_GATEWAY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<StageError> for ApiError {
    fn from(e: StageError) -> Self {
        let stage = e.stage.to_string();
        Self::new(status_for(&e.code), &stage, &e.code, e.message)
    }
}

impl From<FilterError> for ApiError {
    fn from(e: FilterError) -> Self {
        let mut err = Self::new(StatusCode::BAD_REQUEST, "filter", "filter_syntax", e.to_string());
        err.body.position = e.position();
        err
    }
}

impl From<BibliographyError> for ApiError {
    fn from(e: BibliographyError) -> Self {
        let code = e.code();
        Self::new(status_for(code), "bibliography", code, e.to_string())
    }
}

impl From<FeedbackError> for ApiError {
    fn from(e: FeedbackError) -> Self {
        let code = e.code();
        Self::new(status_for(code), "feedback", code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(code = %self.body.code, message = %self.body.message, "request failed");
        }
        (self.status, Json(self.body)).into_response()
    }
}
