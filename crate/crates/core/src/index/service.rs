use std::sync::Arc;

use crate::audit::{AuditAction, AuditDraft, AuditLog, AuditOutcome};
use crate::auth::{denial_draft, Gate};
use crate::error::ServiceError;
use crate::model::Timestamp;

use super::{IndexEntry, LocateQuery, LocateResult, PatientIndex};

/// The index server's request handling: token checks, audit, then the index.
#[derive(Debug, Clone)]
pub struct IndexService {
    index: Arc<PatientIndex>,
    gate: Gate,
    audit: Arc<AuditLog>,
}

impl IndexService {
    pub fn new(index: Arc<PatientIndex>, gate: Gate, audit: Arc<AuditLog>) -> Self {
        IndexService { index, gate, audit }
    }

    pub fn index(&self) -> &PatientIndex {
        &self.index
    }

    pub fn audit(&self) -> &Arc<AuditLog> {
        &self.audit
    }

    pub fn gate(&self) -> &Gate {
        &self.gate
    }

    /// Returns the page of rows and the id of the audit event written for it.
    pub fn locate(
        &self,
        query: &LocateQuery,
        doctor: Option<&str>,
        consent: Option<&str>,
        now: &Timestamp,
    ) -> Result<(LocateResult, u64), ServiceError> {
        let grant = match self.gate.two_way(doctor, consent, now) {
            Ok(g) => g,
            Err(d) => return Err(self.deny(now, d.error, d.doctor.as_ref(), query)),
        };
        let c = &grant.consent;
        let refusal = if c.patient_ref != query.patient_ref {
            Some("consent is for another patient")
        } else if !c.covers_range(&query.date_from, &query.date_to) {
            Some("consent does not cover the date range")
        } else if !c.covers_types(&query.ehr_types) {
            Some("consent does not cover the record types")
        } else {
            None
        };
        if let Some(msg) = refusal {
            return Err(self.deny(now, ServiceError::forbidden(msg), Some(&grant.doctor), query));
        }

        let result = self.index.locate_unchecked(query)?;
        let id = self.audit.append(
            AuditDraft::new(*now, AuditAction::Locate, AuditOutcome::Success)
                .actor(&grant.doctor.sub, &grant.doctor.hospital_id)
                .patient(&query.patient_ref)
                .detail(format!("rows={}", result.rows.len())),
        )?;
        Ok((result, id))
    }

    fn deny(
        &self,
        now: &Timestamp,
        error: ServiceError,
        doctor: Option<&crate::auth::DoctorClaims>,
        query: &LocateQuery,
    ) -> ServiceError {
        let draft = denial_draft(now, "locate", &error, doctor).patient(&query.patient_ref);
        match self.audit.append(draft) {
            Ok(_) => error,
            Err(e) => e.into(),
        }
    }

    /// Accepts entries from a hospital node, which may only publish entries
    /// located at itself. Returns the number of entries received.
    pub fn upsert(&self, entries: &[IndexEntry], node_token: Option<&str>, now: &Timestamp) -> Result<usize, ServiceError> {
        let node = self.gate.node(node_token, now)?;
        if let Some(e) = entries.iter().find(|e| e.location != node.hospital_id) {
            return Err(ServiceError::forbidden(format!(
                "{} cannot publish entries located at {}",
                node.hospital_id, e.location
            )));
        }
        let applied = self.index.upsert_entries(entries)?;
        tracing::debug!(hospital = %node.hospital_id, received = entries.len(), applied, "index upsert");
        Ok(entries.len())
    }
}
