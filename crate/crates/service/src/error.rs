use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use cdmp_core::pipeline::PipelineError;
use cdmp_core::workspace::WorkspaceError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::json_response;

/// Every code the service can put in an error body.
pub const ERROR_CODES: &[&str] = &[
    "bad_request",
    "not_found",
    "conflict",
    "internal",
    // domain codes, all 422
    "infeasible",
    "degenerate_problem",
    "invalid_geometry",
    "empty_region_list",
    "invalid_options",
    "invalid_parameter",
    "negative_time",
    "dimension_mismatch",
    "demo_too_short",
    "non_monotonic_timestamps",
    "invalid_demonstration",
    "degenerate_demonstration",
    "non_finite_state",
    "invalid_keypoint",
    "segment_too_short",
    "world_frame_segment",
    "dangling_reference",
    "duplicate_id",
    "referenced",
    "unknown_schema_version",
    "malformed_workspace",
    "io_error",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        debug_assert!(ERROR_CODES.contains(&code), "undocumented error code {code}");
        ApiError { code: code.to_string(), message: message.into(), details: None }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new("bad_request", message)
    }

    pub fn not_found(kind: &str, id: &str) -> Self {
        ApiError::new("not_found", format!("{kind} `{id}` not found")).with_details(json!({ "kind": kind, "id": id }))
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        ApiError::new("conflict", message)
    }

    pub fn status(&self) -> StatusCode {
        match self.code.as_str() {
            "bad_request" | "malformed_workspace" | "unknown_schema_version" => StatusCode::BAD_REQUEST,
            "not_found" => StatusCode::NOT_FOUND,
            "conflict" => StatusCode::CONFLICT,
            "internal" | "io_error" => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        }
    }
}

impl From<WorkspaceError> for ApiError {
    fn from(e: WorkspaceError) -> Self {
        let details = match &e {
            WorkspaceError::DanglingReference { id, .. } => Some(json!({ "id": id })),
            WorkspaceError::Referenced { dependents, .. } => Some(json!({ "dependents": dependents })),
            WorkspaceError::NotFound { kind, id } => return ApiError::not_found(kind, id),
            _ => None,
        };
        ApiError { code: e.code().to_string(), message: e.to_string(), details }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::NotFound { kind, id } => ApiError::not_found(kind, &id),
            PipelineError::Workspace(w) => w.into(),
            other => ApiError { code: other.code().to_string(), message: other.to_string(), details: None },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        json_response(self.status(), &self)
    }
}
