use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Query, State};
use axum::http::HeaderMap;
use axum::routing::{get, post};
use axum::Router;
use ehrfed_core::audit::AuditLog;
use ehrfed_core::auth::{denial_draft, AuthService, CONSENT_TOKEN_HEADER, DOCTOR_TOKEN_HEADER};
use ehrfed_core::node::{fanout_fetch, FanoutConfig, HospitalNode, SyncAgent, SyncReport, TransferRequest};
use ehrfed_core::ServiceError;

use crate::audit_http;
use crate::client::{IndexClient, PeerClient};
use crate::wire::{
    bearer, blocking, header_str, now, ok, ok_audited, parse_body, ApiError, ApiResult, AuditParams, ConsentRequest,
    FanoutRequest, Health, LoginRequest, TokenResponse,
};

/// Everything a running hospital node holds.
#[derive(Debug)]
pub struct NodeState {
    pub auth: Arc<AuthService>,
    pub node: Arc<HospitalNode>,
    pub agent: Arc<SyncAgent>,
    pub index: IndexClient,
    pub peers: PeerClient,
    pub fanout: FanoutConfig,
}

impl NodeState {
    pub fn hospital_id(&self) -> &str {
        self.node.hospital_id()
    }

    pub fn audit(&self) -> &Arc<AuditLog> {
        self.node.audit()
    }

    pub async fn sync_now(&self) -> Result<SyncReport, ServiceError> {
        self.agent.sync_run(&self.index, &now()).await
    }
}

pub fn router(state: Arc<NodeState>) -> Router {
    Router::new()
        .route("/auth/login", post(login))
        .route("/auth/consent", post(consent))
        .route("/transfer", post(transfer))
        .route("/fanout", post(fanout))
        .route("/sync/run", post(sync_run))
        .route("/healthz", get(health))
        .route("/audit", get(audit))
        .route("/audit/verify", get(audit_verify))
        .with_state(state)
}

fn doctor_and_consent(headers: &HeaderMap) -> (Option<String>, Option<String>) {
    (
        header_str(headers, DOCTOR_TOKEN_HEADER).map(str::to_owned),
        header_str(headers, CONSENT_TOKEN_HEADER).map(str::to_owned),
    )
}

async fn login(State(st): State<Arc<NodeState>>, body: Bytes) -> ApiResult {
    let req: LoginRequest = parse_body(&body)?;
    let auth = Arc::clone(&st.auth);
    let t = now();
    let token = blocking(move || auth.doctor_login(&req.doctor_id, &req.secret, &req.hospital_id, &t)).await?;
    Ok(ok(&TokenResponse { token }))
}

async fn consent(State(st): State<Arc<NodeState>>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let doctor = bearer(&headers)
        .or_else(|| header_str(&headers, DOCTOR_TOKEN_HEADER))
        .map(str::to_owned);
    let req: ConsentRequest = parse_body(&body)?;
    let auth = Arc::clone(&st.auth);
    let t = now();
    let token = blocking(move || auth.grant_consent(&req.scan, doctor.as_deref(), &req.scope, &t)).await?;
    Ok(ok(&TokenResponse { token }))
}

async fn transfer(State(st): State<Arc<NodeState>>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let (doctor, consent) = doctor_and_consent(&headers);
    let req: TransferRequest = parse_body(&body)?;
    let node = Arc::clone(&st.node);
    let t = now();
    let (record, id) = blocking(move || node.transfer(&req, doctor.as_deref(), consent.as_deref(), &t)).await?;
    Ok(ok_audited(&record, id))
}

async fn fanout(State(st): State<Arc<NodeState>>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let (doctor, consent) = doctor_and_consent(&headers);
    let t = now();
    if let Err(d) = st.node.gate().two_way(doctor.as_deref(), consent.as_deref(), &t) {
        let audit = Arc::clone(st.audit());
        let draft = denial_draft(&t, "fanout", &d.error, d.doctor.as_ref());
        blocking(move || audit.append(draft).map_err(ServiceError::from)).await?;
        return Err(ApiError(d.error));
    }
    let req: FanoutRequest = parse_body(&body)?;
    let result = fanout_fetch(
        &st.node,
        &st.peers,
        &req.rows,
        doctor.as_deref().unwrap_or_default(),
        consent.as_deref().unwrap_or_default(),
        &st.fanout,
        &t,
    )
    .await;
    Ok(ok(&result))
}

async fn sync_run(State(st): State<Arc<NodeState>>, headers: HeaderMap) -> ApiResult {
    let admin = st.node.gate().admin(bearer(&headers), &now())?;
    if admin.hospital_id != st.hospital_id() {
        return Err(ApiError(ServiceError::forbidden(format!(
            "only {} administrators can run its sync",
            st.hospital_id()
        ))));
    }
    Ok(ok(&st.sync_now().await?))
}

async fn health(State(st): State<Arc<NodeState>>) -> ApiResult {
    Ok(ok(&Health {
        status: "ok".into(),
        server_id: st.hospital_id().to_string(),
    }))
}

async fn audit(
    State(st): State<Arc<NodeState>>,
    headers: HeaderMap,
    params: Result<Query<AuditParams>, QueryRejection>,
) -> ApiResult {
    audit_http::query(st.node.gate(), st.audit(), &headers, params)
}

async fn audit_verify(State(st): State<Arc<NodeState>>, headers: HeaderMap) -> ApiResult {
    audit_http::verify(st.node.gate(), Arc::clone(st.audit()), &headers).await
}
