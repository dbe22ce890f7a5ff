//! Hospital node: the local record store, the transfer operation, the sync
//! agent that publishes index entries, and fan-out over peer hospitals.

mod fanout;
mod store;
mod sync;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audit::{AuditAction, AuditDraft, AuditLog, AuditOutcome};
use crate::auth::{denial_draft, DoctorClaims, Gate};
use crate::error::ServiceError;
use crate::model::{EhrType, Timestamp, UnifiedEhr};

pub use fanout::{fanout_fetch, FanoutConfig, FanoutFailure, FanoutResult, TransferEvent, TransferPeer};
pub use store::{RecordStore, StoreError, RECORDS_FILE};
pub use sync::{CrashPoint, IndexSink, SyncAgent, SyncIssue, SyncReport, SYNC_STATE_FILE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRequest {
    pub ehr_id: String,
    pub ehr_type: EhrType,
}

/// Serves this hospital's records to authorized doctors.
#[derive(Debug, Clone)]
pub struct HospitalNode {
    hospital_id: String,
    store: Arc<RecordStore>,
    gate: Gate,
    audit: Arc<AuditLog>,
}

impl HospitalNode {
    pub fn new(store: Arc<RecordStore>, gate: Gate, audit: Arc<AuditLog>) -> Self {
        HospitalNode {
            hospital_id: store.hospital_id().to_string(),
            store,
            gate,
            audit,
        }
    }

    pub fn hospital_id(&self) -> &str {
        &self.hospital_id
    }

    pub fn store(&self) -> &Arc<RecordStore> {
        &self.store
    }

    pub fn audit(&self) -> &Arc<AuditLog> {
        &self.audit
    }

    pub fn gate(&self) -> &Gate {
        &self.gate
    }

    /// Returns the full record and the id of the audit event written for it.
    pub fn transfer(
        &self,
        req: &TransferRequest,
        doctor: Option<&str>,
        consent: Option<&str>,
        now: &Timestamp,
    ) -> Result<(UnifiedEhr, u64), ServiceError> {
        let grant = match self.gate.two_way(doctor, consent, now) {
            Ok(g) => g,
            Err(d) => return Err(self.deny(now, d.error, d.doctor.as_ref(), req)),
        };
        if req.ehr_id.trim().is_empty() {
            return Err(ServiceError::validation("ehr_id is empty"));
        }
        let record = match self.store.get(&req.ehr_id).filter(|r| r.ehr_type == req.ehr_type) {
            Some(r) => r,
            None => {
                let err = ServiceError::not_found(format!("no {} record {} at {}", req.ehr_type, req.ehr_id, self.hospital_id));
                self.audit.append(
                    AuditDraft::new(*now, AuditAction::Transfer, AuditOutcome::Error)
                        .actor(&grant.doctor.sub, &grant.doctor.hospital_id)
                        .ehr(&req.ehr_id)
                        .detail(err.message.clone()),
                )?;
                return Err(err);
            }
        };
        let c = &grant.consent;
        let refusal = if c.patient_ref != record.patient_ref {
            Some("consent is for another patient")
        } else if !c.covers_instant(&record.recorded_at) || !c.covers_type(record.ehr_type) {
            Some("consent does not cover this record")
        } else {
            None
        };
        if let Some(msg) = refusal {
            return Err(self.deny(now, ServiceError::forbidden(msg), Some(&grant.doctor), req));
        }
        let id = self.audit.append(
            AuditDraft::new(*now, AuditAction::Transfer, AuditOutcome::Success)
                .actor(&grant.doctor.sub, &grant.doctor.hospital_id)
                .ehr(&record.ehr_id)
                .patient(&record.patient_ref),
        )?;
        Ok((record, id))
    }

    fn deny(&self, now: &Timestamp, error: ServiceError, doctor: Option<&DoctorClaims>, req: &TransferRequest) -> ServiceError {
        match self.audit.append(denial_draft(now, "transfer", &error, doctor).ehr(&req.ehr_id)) {
            Ok(_) => error,
            Err(e) => e.into(),
        }
    }
}


#[cfg(test)]
mod tests {
    use super::testkit::site;
    use super::*;
    use crate::auth::ConsentScope;
    use crate::model::fixtures::hemodialysis_record;
    use crate::model::parse_timestamp;

    fn now() -> Timestamp {
        parse_timestamp("2016-05-01T09:00:00+08:00").unwrap()
    }

    fn scope(from: &str, to: &str) -> ConsentScope {
        ConsentScope {
            from: parse_timestamp(from).unwrap(),
            to: parse_timestamp(to).unwrap(),
            types: vec![],
        }
    }

    fn req(id: &str) -> TransferRequest {
        TransferRequest {
            ehr_id: id.into(),
            ehr_type: EhrType::Hemodialysis,
        }
    }

    #[test]
    fn transfer_outcomes() {
        let dir = tempfile::tempdir().unwrap();
        let s = site("HC", dir.path());
        s.node.store().put(&hemodialysis_record()).unwrap();
        let all = scope("2010-01-01T00:00:00+08:00", "2016-12-31T23:59:59+08:00");
        let doctor = s.auth.doctor_login("dr-chan", "pw-chan", "HC", &now()).unwrap();
        let yang = s.auth.grant_consent("M1234567", Some(&doctor), &all, &now()).unwrap();
        let other = s.auth.grant_consent("M7654321", Some(&doctor), &all, &now()).unwrap();
        let before = s
            .auth
            .grant_consent("M1234567", Some(&doctor), &scope("2010-01-01T00:00:00+08:00", "2014-12-31T00:00:00+08:00"), &now())
            .unwrap();

        let status = |r: &TransferRequest, d: Option<&str>, c: Option<&str>| s.node.transfer(r, d, c, &now()).unwrap_err().status();
        assert_eq!(status(&req("0221"), None, None), 401);
        assert_eq!(status(&req("0221"), None, Some(&yang)), 401);
        assert_eq!(status(&req("0221"), Some(&doctor), None), 403);
        assert_eq!(status(&req("0221"), Some(&doctor), Some(&other)), 403);
        assert_eq!(status(&req("0221"), Some(&doctor), Some(&before)), 403);
        assert_eq!(status(&req("9999"), Some(&doctor), Some(&yang)), 404);
        let mut wrong_type = req("0221");
        wrong_type.ehr_type = EhrType::LabReport;
        assert_eq!(status(&wrong_type, Some(&doctor), Some(&yang)), 404);

        let (rec, id) = s.node.transfer(&req("0221"), Some(&doctor), Some(&yang), &now()).unwrap();
        assert_eq!(rec, hemodialysis_record());
        let log = s.node.audit().records();
        let last = log.last().unwrap();
        assert_eq!(last.event_id, id);
        assert_eq!((last.action, last.outcome), (AuditAction::Transfer, AuditOutcome::Success));
        assert_eq!(last.ehr_id.as_deref(), Some("0221"));
        assert_eq!(s.node.audit().count(AuditAction::Denied, AuditOutcome::Denied), 5);
        assert_eq!(s.node.audit().count(AuditAction::Transfer, AuditOutcome::Error), 2);
    }

    #[test]
    fn consent_from_another_hospital_is_honoured() {
        let dir = tempfile::tempdir().unwrap();
        let hc = site("HC", dir.path());
        let kw = site("KW", dir.path());
        let mut rec = hemodialysis_record();
        rec.hospital_id = "KW".into();
        kw.node.store().put(&rec).unwrap();
        let all = scope("2010-01-01T00:00:00+08:00", "2016-12-31T23:59:59+08:00");
        let doctor = hc.auth.doctor_login("dr-chan", "pw-chan", "HC", &now()).unwrap();
        let consent = hc.auth.grant_consent("M1234567", Some(&doctor), &all, &now()).unwrap();
        let (got, _) = kw.node.transfer(&req("0221"), Some(&doctor), Some(&consent), &now()).unwrap();
        assert_eq!(got.hospital_id, "KW");
        let rec = kw.node.audit().records().pop().unwrap();
        assert_eq!((rec.server_id.as_str(), rec.actor_hospital.as_str()), ("KW", "HC"));
    }
}
