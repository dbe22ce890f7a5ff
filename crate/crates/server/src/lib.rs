//! HTTP services of the federated EHR exchange.
//!
//! The index server answers `POST /locate` and accepts `POST /index/upsert`
//! from hospital nodes. Each hospital node serves `POST /transfer`,
//! `POST /fanout`, `POST /sync/run`, `POST /auth/login` and
//! `POST /auth/consent`. Both expose `GET /healthz` and the admin-only
//! `GET /audit` and `GET /audit/verify`.

mod audit_http;
pub mod client;
pub mod config;
pub mod index_http;
pub mod launch;
pub mod layout;
pub mod node_http;
pub mod wire;

pub use client::{http_client, AuditClient, HttpClient, IndexClient, NodeClient, PeerClient};
pub use config::{NodeConfig, Topology};
pub use launch::{Component, Federation, LaunchError, LaunchOptions};
