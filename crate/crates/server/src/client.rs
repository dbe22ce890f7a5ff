//! HTTP clients for the index server and hospital nodes. They implement the
//! core transport traits so the same sync, fan-out and audit code runs over
//! the network.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use ehrfed_core::audit::{AuditQuery, AuditRecord, AuditSource, IntegrityReport};
use ehrfed_core::auth::{AuthService, ConsentScope, CONSENT_TOKEN_HEADER, DOCTOR_TOKEN_HEADER, NODE_TOKEN_HEADER};
use ehrfed_core::index::{IndexEntry, LocateQuery, LocateResult, LocateRow};
use ehrfed_core::node::{FanoutResult, IndexSink, SyncReport, TransferPeer, TransferRequest};
use ehrfed_core::{ErrorClass, ServiceError, UnifiedEhr};
use reqwest::{RequestBuilder, Response};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::wire::{
    error_from_response, now, ConsentRequest, FanoutRequest, Health, LoginRequest, TokenResponse, UpsertResponse,
};

pub type HttpClient = reqwest::Client;

pub fn http_client(timeout: Duration) -> HttpClient {
    reqwest::Client::builder()
        .connect_timeout(Duration::from_secs(2))
        .timeout(timeout)
        .build()
        .expect("http client builds")
}

fn unreachable(url: &str, e: reqwest::Error) -> ServiceError {
    let class = if e.is_decode() {
        ErrorClass::Internal
    } else {
        ErrorClass::Unavailable
    };
    ServiceError::new(class, format!("{url} unreachable")).with_detail(e.to_string())
}

async fn send(url: &str, req: RequestBuilder) -> Result<Response, ServiceError> {
    let resp = req.send().await.map_err(|e| unreachable(url, e))?;
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let body = resp.bytes().await.unwrap_or_default();
    Err(error_from_response(status.as_u16(), &body))
}

async fn json<T: DeserializeOwned>(url: &str, resp: Response) -> Result<T, ServiceError> {
    let body = resp.bytes().await.map_err(|e| unreachable(url, e))?;
    serde_json::from_slice(&body)
        .map_err(|e| ServiceError::internal(format!("{url} sent an unreadable body")).with_detail(e.to_string()))
}

fn event_id(resp: &Response) -> Option<u64> {
    resp.headers()
        .get(crate::wire::AUDIT_EVENT_HEADER)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok())
}

async fn post<B: Serialize, T: DeserializeOwned>(
    http: &reqwest::Client,
    url: String,
    body: &B,
    headers: &[(&str, &str)],
) -> Result<(T, Option<u64>), ServiceError> {
    let mut req = http.post(&url).json(body);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let resp = send(&url, req).await?;
    let id = event_id(&resp);
    Ok((json(&url, resp).await?, id))
}

pub async fn health(http: &reqwest::Client, base: &str) -> Result<Health, ServiceError> {
    let url = format!("{base}/healthz");
    let resp = send(&url, http.get(&url)).await?;
    json(&url, resp).await
}

/// The index server as seen by a hospital node or a doctor's workstation.
#[derive(Debug, Clone)]
pub struct IndexClient {
    base: String,
    http: reqwest::Client,
    auth: Option<Arc<AuthService>>,
}

impl IndexClient {
    pub fn new(base: &str, http: reqwest::Client) -> Self {
        IndexClient {
            base: base.trim_end_matches('/').to_string(),
            http,
            auth: None,
        }
    }

    /// Signs upserts with node tokens minted by `auth`.
    pub fn publishing_as(mut self, auth: Arc<AuthService>) -> Self {
        self.auth = Some(auth);
        self
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub async fn locate(
        &self,
        query: &LocateQuery,
        doctor: &str,
        consent: &str,
    ) -> Result<(LocateResult, Option<u64>), ServiceError> {
        post(
            &self.http,
            format!("{}/locate", self.base),
            query,
            &[(DOCTOR_TOKEN_HEADER, doctor), (CONSENT_TOKEN_HEADER, consent)],
        )
        .await
    }

    /// Follows cursors until the last page.
    pub async fn locate_all(&self, query: &LocateQuery, doctor: &str, consent: &str) -> Result<Vec<LocateRow>, ServiceError> {
        let mut q = query.clone();
        let mut rows = Vec::new();
        loop {
            let (page, _) = self.locate(&q, doctor, consent).await?;
            rows.extend(page.rows);
            match page.next_cursor {
                Some(c) => q.cursor = Some(c),
                None => return Ok(rows),
            }
        }
    }

    pub async fn upsert_with(&self, entries: &[IndexEntry], node_token: &str) -> Result<usize, ServiceError> {
        let (resp, _): (UpsertResponse, _) = post(
            &self.http,
            format!("{}/index/upsert", self.base),
            &entries,
            &[(NODE_TOKEN_HEADER, node_token)],
        )
        .await?;
        Ok(resp.received)
    }
}

impl IndexSink for IndexClient {
    async fn upsert(&self, entries: &[IndexEntry]) -> Result<usize, ServiceError> {
        let auth = self
            .auth
            .as_ref()
            .ok_or_else(|| ServiceError::internal("index client has no node identity"))?;
        let token = auth.node_token(&now())?;
        self.upsert_with(entries, &token).await
    }
}

/// Transfers to other hospitals, addressed by hospital id.
#[derive(Debug, Clone)]
pub struct PeerClient {
    peers: BTreeMap<String, String>,
    http: reqwest::Client,
}

impl PeerClient {
    pub fn new(peers: BTreeMap<String, String>, http: reqwest::Client) -> Self {
        let peers = peers
            .into_iter()
            .map(|(k, v)| (k, v.trim_end_matches('/').to_string()))
            .collect();
        PeerClient { peers, http }
    }

    pub fn url(&self, hospital_id: &str) -> Option<&str> {
        self.peers.get(hospital_id).map(String::as_str)
    }
}

impl TransferPeer for PeerClient {
    async fn transfer(
        &self,
        hospital_id: &str,
        req: &TransferRequest,
        doctor: &str,
        consent: &str,
    ) -> Result<(UnifiedEhr, Option<u64>), ServiceError> {
        let base = self
            .url(hospital_id)
            .ok_or_else(|| ServiceError::new(ErrorClass::Unavailable, format!("no route to hospital {hospital_id}")))?;
        post(
            &self.http,
            format!("{base}/transfer"),
            req,
            &[(DOCTOR_TOKEN_HEADER, doctor), (CONSENT_TOKEN_HEADER, consent)],
        )
        .await
    }
}

/// A doctor's view of one hospital node.
#[derive(Debug, Clone)]
pub struct NodeClient {
    base: String,
    http: reqwest::Client,
}

impl NodeClient {
    pub fn new(base: &str, http: reqwest::Client) -> Self {
        NodeClient {
            base: base.trim_end_matches('/').to_string(),
            http,
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub async fn login(&self, doctor_id: &str, secret: &str, hospital_id: &str) -> Result<String, ServiceError> {
        let body = LoginRequest {
            doctor_id: doctor_id.into(),
            secret: secret.into(),
            hospital_id: hospital_id.into(),
        };
        let (t, _): (TokenResponse, _) = post(&self.http, format!("{}/auth/login", self.base), &body, &[]).await?;
        Ok(t.token)
    }

    pub async fn consent(&self, doctor: &str, scan: &str, scope: &ConsentScope) -> Result<String, ServiceError> {
        let body = ConsentRequest {
            scan: scan.into(),
            scope: scope.clone(),
        };
        let bearer = format!("Bearer {doctor}");
        let (t, _): (TokenResponse, _) = post(
            &self.http,
            format!("{}/auth/consent", self.base),
            &body,
            &[("Authorization", bearer.as_str())],
        )
        .await?;
        Ok(t.token)
    }

    pub async fn transfer(
        &self,
        req: &TransferRequest,
        doctor: &str,
        consent: &str,
    ) -> Result<(UnifiedEhr, Option<u64>), ServiceError> {
        post(
            &self.http,
            format!("{}/transfer", self.base),
            req,
            &[(DOCTOR_TOKEN_HEADER, doctor), (CONSENT_TOKEN_HEADER, consent)],
        )
        .await
    }

    pub async fn fanout(&self, rows: &[LocateRow], doctor: &str, consent: &str) -> Result<FanoutResult, ServiceError> {
        let body = FanoutRequest { rows: rows.to_vec() };
        let (r, _) = post(
            &self.http,
            format!("{}/fanout", self.base),
            &body,
            &[(DOCTOR_TOKEN_HEADER, doctor), (CONSENT_TOKEN_HEADER, consent)],
        )
        .await?;
        Ok(r)
    }

    pub async fn sync_run(&self, admin: &str) -> Result<SyncReport, ServiceError> {
        let bearer = format!("Bearer {admin}");
        let (r, _) = post(
            &self.http,
            format!("{}/sync/run", self.base),
            &serde_json::json!({}),
            &[("Authorization", bearer.as_str())],
        )
        .await?;
        Ok(r)
    }
}

/// Audit endpoint of one server (index or hospital).
#[derive(Debug, Clone)]
pub struct AuditClient {
    server_id: String,
    base: String,
    http: reqwest::Client,
}

impl AuditClient {
    pub fn new(server_id: &str, base: &str, http: reqwest::Client) -> Self {
        AuditClient {
            server_id: server_id.into(),
            base: base.trim_end_matches('/').to_string(),
            http,
        }
    }

    pub async fn verify(&self, admin_token: &str) -> Result<IntegrityReport, ServiceError> {
        let url = format!("{}/audit/verify", self.base);
        let resp = send(&url, self.http.get(&url).bearer_auth(admin_token)).await?;
        json(&url, resp).await
    }
}

impl AuditSource for AuditClient {
    fn server_id(&self) -> &str {
        &self.server_id
    }

    async fn query(&self, query: &AuditQuery, admin_token: &str) -> Result<Vec<AuditRecord>, ServiceError> {
        let url = format!("{}/audit", self.base);
        let params = [
            ("ehr_id", query.ehr_id.clone()),
            ("from", ehrfed_core::model::format_timestamp(&query.from)),
            ("to", ehrfed_core::model::format_timestamp(&query.to)),
        ];
        let resp = send(&url, self.http.get(&url).query(&params).bearer_auth(admin_token)).await?;
        json(&url, resp).await
    }
}
