use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::HeaderMap;
use axum::routing::{get, post};
use axum::Router;
use ehrfed_core::auth::{CONSENT_TOKEN_HEADER, DOCTOR_TOKEN_HEADER, NODE_TOKEN_HEADER};
use ehrfed_core::index::{IndexEntry, IndexService, LocateQuery};

use crate::audit_http;
use crate::wire::{blocking, header_str, now, ok, ok_audited, parse_body, ApiResult, Health, UpsertResponse};

pub const INDEX_SERVER_ID: &str = "IDX";

pub fn router(service: Arc<IndexService>) -> Router {
    Router::new()
        .route("/locate", post(locate))
        .route("/index/upsert", post(upsert))
        .route("/healthz", get(health))
        .route("/audit", get(audit))
        .route("/audit/verify", get(audit_verify))
        .with_state(service)
}

async fn locate(State(svc): State<Arc<IndexService>>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let query: LocateQuery = parse_body(&body)?;
    let doctor = header_str(&headers, DOCTOR_TOKEN_HEADER).map(str::to_owned);
    let consent = header_str(&headers, CONSENT_TOKEN_HEADER).map(str::to_owned);
    let t = now();
    let (result, id) = blocking(move || svc.locate(&query, doctor.as_deref(), consent.as_deref(), &t)).await?;
    Ok(ok_audited(&result, id))
}

async fn upsert(State(svc): State<Arc<IndexService>>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let token = header_str(&headers, NODE_TOKEN_HEADER).map(str::to_owned);
    let t = now();
    svc.gate().node(token.as_deref(), &t)?;
    let entries: Vec<IndexEntry> = parse_body(&body)?;
    let received = blocking(move || svc.upsert(&entries, token.as_deref(), &t)).await?;
    Ok(ok(&UpsertResponse { received }))
}

async fn health(State(svc): State<Arc<IndexService>>) -> ApiResult {
    Ok(ok(&Health {
        status: "ok".into(),
        server_id: svc.audit().server_id().to_string(),
    }))
}

async fn audit(
    State(svc): State<Arc<IndexService>>,
    headers: HeaderMap,
    params: Result<Query<crate::wire::AuditParams>, axum::extract::rejection::QueryRejection>,
) -> ApiResult {
    audit_http::query(svc.gate(), svc.audit(), &headers, params)
}

async fn audit_verify(State(svc): State<Arc<IndexService>>, headers: HeaderMap) -> ApiResult {
    audit_http::verify(svc.gate(), Arc::clone(svc.audit()), &headers).await
}
