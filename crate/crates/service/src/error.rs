use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use clinexplain::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown cohort {0}")]
    UnknownCohort(String),

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("internal error: {0}")]
    Internal(String),
}

/// Machine-readable error body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ServiceError {
    pub fn status_and_code(&self) -> (StatusCode, &'static str) {
        use CoreError as E;
        match self {
            ServiceError::Core(e) => match e {
                E::UnknownPatient(_) => (StatusCode::NOT_FOUND, "unknown_patient"),
                E::UnknownTarget(_) => (StatusCode::NOT_FOUND, "unknown_target"),
                E::UnknownFeature(_) => (StatusCode::NOT_FOUND, "unknown_feature"),
                E::UnknownAttribute(_) => (StatusCode::BAD_REQUEST, "unknown_attribute"),
                E::InvalidInput(_) | E::InvalidConfig(_) => (StatusCode::BAD_REQUEST, "invalid_input"),
                E::NotAbnormal(_) => (StatusCode::CONFLICT, "not_abnormal"),
                E::UndefinedReference(_) => (StatusCode::CONFLICT, "undefined_reference"),
                _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            },
            ServiceError::Config(_) => (StatusCode::INTERNAL_SERVER_ERROR, "config"),
            ServiceError::UnknownCohort(_) => (StatusCode::NOT_FOUND, "unknown_cohort"),
            ServiceError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ServiceError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, code) = self.status_and_code();
        let body = ErrorBody {
            code: code.to_string(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}
