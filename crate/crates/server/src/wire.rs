//! Request and response bodies shared by the servers and the client.

use axum::body::Bytes;
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use ehrfed_core::auth::ConsentScope;
use ehrfed_core::canonical::to_canonical_bytes;
use ehrfed_core::index::LocateRow;
use ehrfed_core::model::rfc3339;
use ehrfed_core::{ErrorClass, ServiceError, Timestamp};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const AUDIT_EVENT_HEADER: &str = "X-Audit-Event-Id";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoginRequest {
    pub doctor_id: String,
    pub secret: String,
    pub hospital_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenResponse {
    pub token: String,
}

/// The ID card scan travels once, from the consent desk to the doctor's
/// own hospital, and is hashed there.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsentRequest {
    pub scan: String,
    pub scope: ConsentScope,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FanoutRequest {
    pub rows: Vec<LocateRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpsertResponse {
    pub received: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub server_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditParams {
    pub ehr_id: String,
    #[serde(with = "rfc3339")]
    pub from: Timestamp,
    #[serde(with = "rfc3339")]
    pub to: Timestamp,
}

/// A [`ServiceError`] as an HTTP response.
#[derive(Debug)]
pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let e = self.0;
        let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = ErrorBody {
            code: e.class.code().to_string(),
            message: e.message,
            detail: e.detail,
        };
        (status, json_bytes(&body)).into_response()
    }
}

pub type ApiResult = Result<Response, ApiError>;

fn json_bytes<T: Serialize>(value: &T) -> ([(HeaderName, HeaderValue); 1], Vec<u8>) {
    let body = to_canonical_bytes(value).expect("response bodies serialize");
    ([(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))], body)
}

/// 200 with a canonical JSON body.
pub fn ok<T: Serialize>(value: &T) -> Response {
    json_bytes(value).into_response()
}

/// 200 with a canonical JSON body and the id of the audit event behind it.
pub fn ok_audited<T: Serialize>(value: &T, event_id: u64) -> Response {
    let mut resp = ok(value);
    resp.headers_mut()
        .insert(HeaderName::from_static("x-audit-event-id"), HeaderValue::from(event_id));
    resp
}

pub fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError(ServiceError::validation("malformed request body").with_detail(e.to_string())))
}

pub fn header_str<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers.get(name).and_then(|v| v.to_str().ok()).filter(|s| !s.is_empty())
}

pub fn bearer(headers: &HeaderMap) -> Option<&str> {
    header_str(headers, header::AUTHORIZATION.as_str()).and_then(|v| v.strip_prefix("Bearer "))
}

/// Rebuilds a [`ServiceError`] from a non-success response.
pub fn error_from_response(status: u16, body: &[u8]) -> ServiceError {
    let class = ErrorClass::from_status(status);
    match serde_json::from_slice::<ErrorBody>(body) {
        Ok(b) => ServiceError::new(class, b.message).with_detail(b.detail),
        Err(_) => ServiceError::new(class, format!("HTTP {status}")),
    }
}

/// Runs blocking work (file appends with fsync) off the async workers.
pub async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(ServiceError::internal("worker failed").with_detail(e.to_string())))?
        .map_err(ApiError)
}

/// Current time at the one-second precision timestamps are stored with.
pub fn now() -> Timestamp {
    use chrono::SubsecRound;
    chrono::Utc::now().fixed_offset().trunc_subsecs(0)
}
