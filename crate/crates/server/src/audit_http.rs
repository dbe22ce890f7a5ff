//! Audit endpoints shared by the index server and hospital nodes. Any
//! federation administrator may read them.

use std::sync::Arc;

use axum::extract::rejection::QueryRejection;
use axum::extract::Query;
use axum::http::HeaderMap;
use ehrfed_core::audit::AuditLog;
use ehrfed_core::auth::Gate;
use ehrfed_core::ServiceError;

use crate::wire::{bearer, blocking, now, ok, ApiError, ApiResult, AuditParams};

pub fn query(
    gate: &Gate,
    log: &AuditLog,
    headers: &HeaderMap,
    params: Result<Query<AuditParams>, QueryRejection>,
) -> ApiResult {
    gate.admin(bearer(headers), &now())?;
    let Query(p) = params.map_err(|e| ApiError(ServiceError::validation("bad audit query").with_detail(e.body_text())))?;
    if p.from > p.to {
        return Err(ApiError(ServiceError::validation("audit query: from after to")));
    }
    Ok(ok(&log.query(&p.ehr_id, &p.from, &p.to)))
}

pub async fn verify(gate: &Gate, log: Arc<AuditLog>, headers: &HeaderMap) -> ApiResult {
    gate.admin(bearer(headers), &now())?;
    let report = blocking(move || Ok(log.verify())).await?;
    Ok(ok(&report))
}
