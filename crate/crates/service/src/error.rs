use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::{json, Value};
use slice_forecast::Error as CoreError;

use crate::api::ErrorBody;

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            detail: Value::Null,
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message)
    }

    pub fn not_found(model_id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no model with id `{model_id}`"))
            .with_detail(json!({ "model_id": model_id }))
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::ModelFormat { field, expected, found } => {
                ApiError::new(StatusCode::BAD_REQUEST, "model_format", e.to_string()).with_detail(json!({
                    "field": field,
                    "expected": expected,
                    "found": found,
                }))
            }
            CoreError::Json(_) => ApiError::new(StatusCode::BAD_REQUEST, "model_format", e.to_string()),
            CoreError::FeatureMismatch(_) | CoreError::LaggedTargetUnavailable => ApiError::validation(e.to_string()),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
            detail: self.detail,
        };
        (self.status, Json(body)).into_response()
    }
}
