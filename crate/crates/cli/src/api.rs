//! Request/response envelopes of the JSON API.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use sentinel_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    Enroll,
    ReportIncident,
    GetPrediction,
    ListAlerts,
    SafetyPeers,
    ClusterView,
    SimilarityStats,
    Snapshot,
    Restore,
}

impl Operation {
    /// Operations that change agent state and are persisted before replying.
    pub fn is_mutation(self) -> bool {
        matches!(self, Operation::Enroll | Operation::ReportIncident | Operation::Restore)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiRequest {
    pub request_id: String,
    pub agent_id: String,
    pub operation: Operation,
    #[serde(default)]
    pub payload: Value,
}

impl ApiRequest {
    pub fn new(request_id: impl Into<String>, agent_id: impl Into<String>, operation: Operation, payload: Value) -> Self {
        ApiRequest { request_id: request_id.into(), agent_id: agent_id.into(), operation, payload }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    /// Dotted path of the offending request field, when one is to blame.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>, field: Option<String>) -> Self {
        ApiError { code: code.into(), message: message.into(), field }
    }

    /// HTTP status for this error code.
    pub fn status(&self) -> u16 {
        match self.code.as_str() {
            "unknown_agent" | "unknown_subject" => 404,
            "duplicate_label" | "conflicting_record" => 409,
            "storage_error" | "internal" => 500,
            _ => 400,
        }
    }

    pub fn from_core(e: &Error) -> Self {
        let (code, field) = match e {
            Error::SchemaMismatch { .. } => ("schema_mismatch", Some("payload.values".to_string())),
            Error::RangeViolation { feature, .. } => ("range_violation", Some(format!("payload.values.{feature}"))),
            Error::DimensionMismatch { .. } => ("dimension_mismatch", None),
            Error::EmptyTrainingSet => ("empty_training_set", None),
            Error::InsufficientData(_) => ("insufficient_data", None),
            Error::BadK { .. } => ("bad_k", Some("payload.clusters".to_string())),
            Error::UnknownSubject(_) => ("unknown_subject", Some("payload.subject_id".to_string())),
            Error::DuplicateLabel { .. } => ("duplicate_label", Some("payload.observed_at".to_string())),
            Error::ConflictingRecord { .. } => ("conflicting_record", Some("payload.collected_at".to_string())),
            Error::CorruptSnapshot { location, .. } => ("corrupt_snapshot", Some(format!("payload.snapshot:{location}"))),
            Error::Scenario { .. } => ("scenario_error", None),
            Error::BadConfig(_) => ("bad_request", Some("payload".to_string())),
            Error::InvalidSchema(_) | Error::InvalidModel(_) => ("invalid_config", None),
            Error::Parse(_) => ("bad_request", Some("payload".to_string())),
            Error::Io(_) => ("storage_error", None),
        };
        ApiError::new(code, e.to_string(), field)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiResponse {
    pub request_id: String,
    pub agent_id: String,
    pub operation: Option<Operation>,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
}

impl ApiResponse {
    pub fn success(req: &ApiRequest, result: Value) -> Self {
        ApiResponse {
            request_id: req.request_id.clone(),
            agent_id: req.agent_id.clone(),
            operation: Some(req.operation),
            ok: true,
            result: Some(result),
            error: None,
        }
    }

    pub fn failure(req: &ApiRequest, error: ApiError) -> Self {
        ApiResponse {
            request_id: req.request_id.clone(),
            agent_id: req.agent_id.clone(),
            operation: Some(req.operation),
            ok: false,
            result: None,
            error: Some(error),
        }
    }

    /// Response to a body that could not be parsed as a request; echoes
    /// whatever identifiers could be recovered.
    pub fn malformed(body: &Value, error: ApiError) -> Self {
        let text = |k: &str| body.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
        ApiResponse {
            request_id: text("request_id"),
            agent_id: text("agent_id"),
            operation: body.get("operation").and_then(|v| serde_json::from_value(v.clone()).ok()),
            ok: false,
            result: None,
            error: Some(error),
        }
    }

    pub fn status(&self) -> u16 {
        self.error.as_ref().map_or(200, ApiError::status)
    }
}

/// Parses a raw request body into a request, reporting the failing field.
///
/// The error is the complete reply envelope, ready to send.
#[allow(clippy::result_large_err)]
pub fn parse_request(body: &[u8]) -> Result<ApiRequest, ApiResponse> {
    let value: Value = serde_json::from_slice(body).map_err(|e| {
        ApiResponse::malformed(&Value::Null, ApiError::new("bad_request", format!("body is not JSON: {e}"), None))
    })?;
    serde_path_to_error::deserialize(value.clone()).map_err(|e| {
        let field = e.path().to_string();
        let field = if field == "." { None } else { Some(field) };
        ApiResponse::malformed(&value, ApiError::new("bad_request", e.inner().to_string(), field))
    })
}
