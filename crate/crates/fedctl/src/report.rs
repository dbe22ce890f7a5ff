//! Federated audit report: one query fanned out to every server, merged by
//! time, rendered as a fixed-width table.

use std::fmt::Write as _;

use ehrfed_core::audit::{federated_audit, AuditQuery, FederatedAudit};
use ehrfed_core::model::format_timestamp;
use ehrfed_server::index_http::INDEX_SERVER_ID;
use ehrfed_server::AuditClient;

use crate::scenario::Endpoints;

pub fn audit_sources(ep: &Endpoints) -> Vec<AuditClient> {
    let mut sources = vec![AuditClient::new(INDEX_SERVER_ID, &ep.index_url, ep.http.clone())];
    for (h, url) in &ep.nodes {
        sources.push(AuditClient::new(h, url, ep.http.clone()));
    }
    sources
}

pub async fn audit_report(ep: &Endpoints, query: &AuditQuery, admin_token: &str) -> FederatedAudit {
    federated_audit(&audit_sources(ep), query, admin_token).await
}

const COLUMNS: [(&str, usize); 8] = [
    ("time", 25),
    ("server", 6),
    ("event", 6),
    ("doctor", 12),
    ("from", 4),
    ("action", 15),
    ("outcome", 7),
    ("detail", 0),
];

fn cell(out: &mut String, text: &str, width: usize) {
    if width == 0 {
        out.push_str(text);
    } else {
        let _ = write!(out, "{text:<width$} ");
    }
}

pub fn render_table(query: &AuditQuery, audit: &FederatedAudit) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "accesses to {} between {} and {}",
        query.ehr_id,
        format_timestamp(&query.from),
        format_timestamp(&query.to)
    );
    for (name, width) in COLUMNS {
        cell(&mut out, name, width);
    }
    out.push('\n');
    for r in &audit.records {
        let action = serde_json::to_value(r.action).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        let outcome = serde_json::to_value(r.outcome).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        let values = [
            format_timestamp(&r.occurred_at),
            r.server_id.clone(),
            r.event_id.to_string(),
            r.actor_doctor.clone(),
            r.actor_hospital.clone(),
            action,
            outcome,
            r.detail.clone(),
        ];
        for ((_, width), v) in COLUMNS.iter().zip(values) {
            cell(&mut out, &v, *width);
        }
        out.push('\n');
    }
    let _ = writeln!(out, "{} record(s)", audit.records.len());
    for f in &audit.failures {
        let _ = writeln!(out, "server {} did not answer: {}", f.server_id, f.error);
    }
    out
}
