//! Append-only, hash-chained audit log.
//!
//! Every server keeps one log file: one canonical-JSON record per line, each
//! carrying the SHA-256 digest of the previous line. A record is on disk
//! before the operation that triggered it returns; if the write fails the
//! operation fails. Patients appear only as [`PatientRef`]s.

use std::fs::{self, File, OpenOptions};
use std::future::Future;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{sha256_hex, to_canonical_bytes};
use crate::error::ServiceError;
use crate::model::{rfc3339, PatientRef, Timestamp};

pub const GENESIS_DIGEST: &str = "0000000000000000000000000000000000000000000000000000000000000000";
pub const LOG_FILE: &str = "audit.log";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditAction {
    Login,
    ConsentGranted,
    Locate,
    Transfer,
    Denied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditOutcome {
    Success,
    Denied,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub event_id: u64,
    #[serde(with = "rfc3339")]
    pub occurred_at: Timestamp,
    pub server_id: String,
    pub actor_doctor: String,
    pub actor_hospital: String,
    pub action: AuditAction,
    pub ehr_id: Option<String>,
    pub patient_ref: Option<PatientRef>,
    pub outcome: AuditOutcome,
    pub detail: String,
    pub prev_digest: String,
}

/// An audit event before the log assigns its id and chain position.
#[derive(Debug, Clone)]
pub struct AuditDraft {
    pub occurred_at: Timestamp,
    pub actor_doctor: String,
    pub actor_hospital: String,
    pub action: AuditAction,
    pub ehr_id: Option<String>,
    pub patient_ref: Option<PatientRef>,
    pub outcome: AuditOutcome,
    pub detail: String,
}

impl AuditDraft {
    pub fn new(occurred_at: Timestamp, action: AuditAction, outcome: AuditOutcome) -> Self {
        AuditDraft {
            occurred_at,
            actor_doctor: String::new(),
            actor_hospital: String::new(),
            action,
            ehr_id: None,
            patient_ref: None,
            outcome,
            detail: String::new(),
        }
    }

    pub fn actor(mut self, doctor: &str, hospital: &str) -> Self {
        self.actor_doctor = doctor.to_string();
        self.actor_hospital = hospital.to_string();
        self
    }

    pub fn ehr(mut self, ehr_id: &str) -> Self {
        self.ehr_id = Some(ehr_id.to_string());
        self
    }

    pub fn patient(mut self, patient: &PatientRef) -> Self {
        self.patient_ref = Some(patient.clone());
        self
    }

    pub fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit io {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("audit chain broken at line {line}: {reason}")]
    Chain { line: usize, reason: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Durability {
    /// fsync after every record.
    #[default]
    Fsync,
    /// Flush to the OS only; survives process crashes, not power loss.
    Flush,
}

struct Writer {
    file: File,
    last_digest: String,
    next_id: u64,
}

pub struct AuditLog {
    server_id: String,
    path: PathBuf,
    durability: Durability,
    writer: Mutex<Writer>,
    records: RwLock<Vec<AuditRecord>>,
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditLog")
            .field("server_id", &self.server_id)
            .field("path", &self.path)
            .finish()
    }
}

impl AuditLog {
    /// Opens (or creates) `dir/audit.log`, verifying the existing chain.
    pub fn open(dir: &Path, server_id: &str, durability: Durability) -> Result<AuditLog, AuditError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(LOG_FILE);
        let records = if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            verify_lines(&text)?
        } else {
            Vec::new()
        };
        let last_digest = match records.last() {
            Some(r) => digest_of(r)?,
            None => GENESIS_DIGEST.to_string(),
        };
        let next_id = records.last().map_or(1, |r| r.event_id + 1);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        Ok(AuditLog {
            server_id: server_id.to_string(),
            path,
            durability,
            writer: Mutex::new(Writer {
                file,
                last_digest,
                next_id,
            }),
            records: RwLock::new(records),
        })
    }

    pub fn server_id(&self) -> &str {
        &self.server_id
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes the record durably and returns its event id.
    pub fn append(&self, draft: AuditDraft) -> Result<u64, AuditError> {
        let mut w = self.writer.lock().expect("audit writer poisoned");
        let record = AuditRecord {
            event_id: w.next_id,
            occurred_at: draft.occurred_at,
            server_id: self.server_id.clone(),
            actor_doctor: draft.actor_doctor,
            actor_hospital: draft.actor_hospital,
            action: draft.action,
            ehr_id: draft.ehr_id,
            patient_ref: draft.patient_ref,
            outcome: draft.outcome,
            detail: draft.detail,
            prev_digest: w.last_digest.clone(),
        };
        let mut line = to_canonical_bytes(&record)?;
        let digest = sha256_hex(&line);
        line.push(b'\n');
        w.file.write_all(&line).map_err(|e| io_err(&self.path, e))?;
        match self.durability {
            Durability::Fsync => w.file.sync_data(),
            Durability::Flush => w.file.flush(),
        }
        .map_err(|e| io_err(&self.path, e))?;
        w.last_digest = digest;
        w.next_id += 1;
        let id = record.event_id;
        self.records.write().expect("audit records poisoned").push(record);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.records.read().expect("audit records poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.records.read().expect("audit records poisoned").clone()
    }

    /// Records for `ehr_id` with `from <= occurred_at <= to`, oldest first.
    pub fn query(&self, ehr_id: &str, from: &Timestamp, to: &Timestamp) -> Vec<AuditRecord> {
        let records = self.records.read().expect("audit records poisoned");
        let mut out: Vec<AuditRecord> = records
            .iter()
            .filter(|r| r.ehr_id.as_deref() == Some(ehr_id) && r.occurred_at >= *from && r.occurred_at <= *to)
            .cloned()
            .collect();
        out.sort_by(|a, b| a.occurred_at.cmp(&b.occurred_at).then(a.event_id.cmp(&b.event_id)));
        out
    }

    pub fn count(&self, action: AuditAction, outcome: AuditOutcome) -> usize {
        self.records
            .read()
            .expect("audit records poisoned")
            .iter()
            .filter(|r| r.action == action && r.outcome == outcome)
            .count()
    }

    /// Checks the file on disk: the chain itself, and that it still ends at
    /// the last record this log wrote, which catches truncation and edits to
    /// the final line.
    pub fn verify(&self) -> IntegrityReport {
        let mut report = verify_file(&self.path);
        if report.ok {
            let head = self.writer.lock().expect("audit writer poisoned").last_digest.clone();
            let on_disk = fs::read_to_string(&self.path)
                .ok()
                .and_then(|text| text.lines().last().map(|l| sha256_hex(l.as_bytes())))
                .unwrap_or_else(|| GENESIS_DIGEST.to_string());
            if on_disk != head {
                report.ok = false;
                report.error = Some("log does not end at the last written record".into());
            }
        }
        report
    }
}

fn io_err(path: &Path, source: std::io::Error) -> AuditError {
    AuditError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn digest_of(record: &AuditRecord) -> Result<String, AuditError> {
    Ok(sha256_hex(&to_canonical_bytes(record)?))
}

/// Parses and checks a whole log: each line must be canonical, link to the
/// digest of its predecessor, and carry a strictly larger event id.
fn verify_lines(text: &str) -> Result<Vec<AuditRecord>, AuditError> {
    let mut prev = GENESIS_DIGEST.to_string();
    let mut last_id = 0u64;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let chain = |reason: String| AuditError::Chain { line: n, reason };
        let record: AuditRecord = serde_json::from_str(line).map_err(|e| chain(e.to_string()))?;
        let canonical = to_canonical_bytes(&record)?;
        if canonical != line.as_bytes() {
            return Err(chain("line is not in canonical form".into()));
        }
        if record.prev_digest != prev {
            return Err(chain("predecessor digest mismatch".into()));
        }
        if record.event_id <= last_id {
            return Err(chain("event id not increasing".into()));
        }
        last_id = record.event_id;
        prev = sha256_hex(&canonical);
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub path: String,
    pub records: usize,
    pub ok: bool,
    pub error: Option<String>,
}

pub fn verify_file(path: &Path) -> IntegrityReport {
    let result = fs::read_to_string(path)
        .map_err(|e| io_err(path, e))
        .and_then(|text| verify_lines(&text));
    match result {
        Ok(records) => IntegrityReport {
            path: path.display().to_string(),
            records: records.len(),
            ok: true,
            error: None,
        },
        Err(e) => IntegrityReport {
            path: path.display().to_string(),
            records: 0,
            ok: false,
            error: Some(e.to_string()),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditQuery {
    pub ehr_id: String,
    #[serde(with = "rfc3339")]
    pub from: Timestamp,
    #[serde(with = "rfc3339")]
    pub to: Timestamp,
}

/// A server that can answer an audit query (local log or remote endpoint).
pub trait AuditSource {
    fn server_id(&self) -> &str;

    fn query(
        &self,
        query: &AuditQuery,
        admin_token: &str,
    ) -> impl Future<Output = Result<Vec<AuditRecord>, ServiceError>> + Send;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditFailure {
    pub server_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FederatedAudit {
    pub records: Vec<AuditRecord>,
    pub failures: Vec<AuditFailure>,
}

/// Merges per-server results by time (server id and event id break ties).
pub fn merge_by_time(lists: Vec<Vec<AuditRecord>>) -> Vec<AuditRecord> {
    let mut all: Vec<AuditRecord> = lists.into_iter().flatten().collect();
    all.sort_by(|a, b| {
        a.occurred_at
            .cmp(&b.occurred_at)
            .then_with(|| a.server_id.cmp(&b.server_id))
            .then(a.event_id.cmp(&b.event_id))
    });
    all
}

/// Queries every source concurrently; unreachable servers become failures.
pub async fn federated_audit<S: AuditSource>(sources: &[S], query: &AuditQuery, admin_token: &str) -> FederatedAudit {
    let results = join_all(sources.iter().map(|s| s.query(query, admin_token))).await;
    let mut lists = Vec::new();
    let mut failures = Vec::new();
    for (source, result) in sources.iter().zip(results) {
        match result {
            Ok(records) => lists.push(records),
            Err(e) => failures.push(AuditFailure {
                server_id: source.server_id().to_string(),
                error: e.to_string(),
            }),
        }
    }
    FederatedAudit {
        records: merge_by_time(lists),
        failures,
    }
}
