use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use pubcluster_core::CommandError;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Wire form of every error: `{code, message, details}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub details: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
                details: Value::Null,
            },
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.body.details = details;
        self
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::FORBIDDEN, "Unauthorized", "missing or insufficient credentials")
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "InvalidRequest", message)
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", what)
    }

    pub fn storage(e: &std::io::Error) -> Self {
        Self::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "StorageFailure",
            format!("event log append failed: {e}"),
        )
    }

    pub fn not_sim_mode() -> Self {
        Self::new(
            StatusCode::CONFLICT,
            "NotSimMode",
            "manual ticks are only accepted in sim mode",
        )
    }

    pub fn unavailable() -> Self {
        Self::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "Unavailable",
            "command queue is shut down",
        )
    }

    pub fn code(&self) -> &str {
        &self.body.code
    }
}

fn status_for(code: &str) -> StatusCode {
    match code {
        "Unauthorized" | "NotOwner" => StatusCode::FORBIDDEN,
        "UnknownNode" | "UnknownRequest" | "UnknownPlan" | "UnknownBlock" | "UnknownJob" => {
            StatusCode::NOT_FOUND
        }
        "LimitNodes" | "LimitDuration" | "LimitConcurrentBlocks" | "WidthExceedsBlock"
        | "InstanceTooLarge" => StatusCode::UNPROCESSABLE_ENTITY,
        "RequestNotPending" | "StalePlan" | "BlockNotActive" | "NodesBusy" | "RefusedBusy"
        | "IllegalTransition" | "DuplicateNodeId" | "ControllerOverCapacity" => {
            StatusCode::CONFLICT
        }
        _ => StatusCode::BAD_REQUEST,
    }
}

impl From<CommandError> for ApiError {
    fn from(e: CommandError) -> Self {
        let code = e.code();
        Self::new(status_for(code), code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pubcluster_core::RequestId;

    #[test]
    fn codes_map_to_statuses() {
        let e: ApiError = CommandError::UnknownRequest(RequestId(3)).into();
        assert_eq!(e.status, StatusCode::NOT_FOUND);
        assert_eq!(e.code(), "UnknownRequest");
        let e: ApiError = CommandError::LimitNodes {
            requested: 4,
            limit: 3,
        }
        .into();
        assert_eq!(e.status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(ApiError::unauthorized().status, StatusCode::FORBIDDEN);
    }
}
