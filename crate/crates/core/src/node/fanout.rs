use std::collections::BTreeMap;
use std::future::Future;
use std::time::Duration;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::error::ServiceError;
use crate::index::LocateRow;
use crate::model::{Timestamp, UnifiedEhr};

use super::{HospitalNode, TransferRequest};

/// Sends a transfer request to another hospital.
pub trait TransferPeer: Sync {
    fn transfer(
        &self,
        hospital_id: &str,
        req: &TransferRequest,
        doctor: &str,
        consent: &str,
    ) -> impl Future<Output = Result<(UnifiedEhr, Option<u64>), ServiceError>> + Send;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FanoutConfig {
    /// Budget for all of one hospital's transfers.
    pub timeout: Duration,
    /// Transfers in flight at once to any one hospital.
    pub parallelism: usize,
}

impl Default for FanoutConfig {
    fn default() -> Self {
        FanoutConfig {
            timeout: Duration::from_secs(5),
            parallelism: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FanoutFailure {
    pub hospital_id: String,
    /// Error class code, or `timeout`.
    pub error_class: String,
    pub message: String,
    /// Located rows at this hospital that were not returned.
    pub rows: usize,
}

/// Audit event a serving hospital wrote for one returned record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub hospital_id: String,
    pub ehr_id: String,
    pub event_id: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FanoutResult {
    pub records: Vec<UnifiedEhr>,
    pub failures: Vec<FanoutFailure>,
    /// Parallel to `records`.
    #[serde(default)]
    pub events: Vec<TransferEvent>,
}

type GroupOutcome = Result<Vec<(usize, UnifiedEhr, Option<u64>)>, FanoutFailure>;

/// Fetches every located row: local rows from `local` directly, remote rows
/// through `peer`, all remote hospitals concurrently. A hospital with any
/// failed or late transfer contributes no records and one failure entry.
/// Records keep the order of `rows`.
pub async fn fanout_fetch<P: TransferPeer>(
    local: &HospitalNode,
    peer: &P,
    rows: &[LocateRow],
    doctor: &str,
    consent: &str,
    config: &FanoutConfig,
    now: &Timestamp,
) -> FanoutResult {
    let mut groups: BTreeMap<&str, Vec<(usize, &LocateRow)>> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        groups.entry(row.location.as_str()).or_default().push((i, row));
    }

    let mut outcomes: Vec<GroupOutcome> = Vec::new();
    if let Some(own) = groups.remove(local.hospital_id()) {
        outcomes.push(fetch_local(local, &own, doctor, consent, now));
    }
    let remote = groups.into_iter().map(|(hospital, group)| {
        async move {
            let count = group.len();
            let permits = &Semaphore::new(config.parallelism.max(1));
            let fetch = join_all(group.into_iter().map(|(i, row)| async move {
                let _permit = permits.acquire().await.expect("semaphore open");
                let (rec, event) = peer.transfer(hospital, &request_for(row), doctor, consent).await?;
                check_match(row, &rec)?;
                Ok::<_, ServiceError>((i, rec, event))
            }));
            match tokio::time::timeout(config.timeout, fetch).await {
                Err(_) => Err(failure(hospital, "timeout", format!("no answer within {:?}", config.timeout), count)),
                Ok(results) => results
                    .into_iter()
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| failure(hospital, e.class.code(), e.message, count)),
            }
        }
    });
    outcomes.extend(join_all(remote).await);

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(got) => records.extend(got),
            Err(f) => failures.push(f),
        }
    }
    records.sort_by_key(|(i, _, _)| *i);
    failures.sort_by(|a, b| a.hospital_id.cmp(&b.hospital_id));
    let events = records
        .iter()
        .map(|(_, r, event_id)| TransferEvent {
            hospital_id: r.hospital_id.clone(),
            ehr_id: r.ehr_id.clone(),
            event_id: *event_id,
        })
        .collect();
    FanoutResult {
        records: records.into_iter().map(|(_, r, _)| r).collect(),
        failures,
        events,
    }
}

fn fetch_local(
    local: &HospitalNode,
    group: &[(usize, &LocateRow)],
    doctor: &str,
    consent: &str,
    now: &Timestamp,
) -> GroupOutcome {
    group
        .iter()
        .map(|(i, row)| {
            let (rec, event) = local.transfer(&request_for(row), Some(doctor), Some(consent), now)?;
            check_match(row, &rec)?;
            Ok((*i, rec, Some(event)))
        })
        .collect::<Result<Vec<_>, ServiceError>>()
        .map_err(|e| failure(local.hospital_id(), e.class.code(), e.message, group.len()))
}

fn request_for(row: &LocateRow) -> TransferRequest {
    TransferRequest {
        ehr_id: row.ehr_id.clone(),
        ehr_type: row.ehr_type,
    }
}

fn check_match(row: &LocateRow, rec: &UnifiedEhr) -> Result<(), ServiceError> {
    if rec.hospital_id != row.location || rec.ehr_id != row.ehr_id || rec.ehr_type != row.ehr_type {
        return Err(ServiceError::internal(format!(
            "asked for {}/{} and received {}/{}",
            row.location, row.ehr_id, rec.hospital_id, rec.ehr_id
        )));
    }
    Ok(())
}

fn failure(hospital: &str, class: &str, message: String, rows: usize) -> FanoutFailure {
    FanoutFailure {
        hospital_id: hospital.to_string(),
        error_class: class.to_string(),
        message,
        rows,
    }
}
