//! What the seeder generated, kept next to the fixture as the oracle the
//! harness checks the running federation against.

use std::cmp::Reverse;
use std::path::Path;

use ehrfed_core::index::{LocateQuery, LocateRow};
use ehrfed_core::model::rfc3339;
use ehrfed_core::{EhrType, PatientRef, Timestamp};
use serde::{Deserialize, Serialize};

use crate::seed::SeedSpec;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPatient {
    pub index: usize,
    pub national_id: String,
    pub name: String,
    pub patient_ref: PatientRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub hospital_id: String,
    pub ehr_id: String,
    pub patient_index: usize,
    pub patient_ref: PatientRef,
    pub ehr_type: EhrType,
    #[serde(with = "rfc3339")]
    pub recorded_at: Timestamp,
    pub shared: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SeedSpec,
    pub patients: Vec<ManifestPatient>,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> std::io::Result<Manifest> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    pub fn patient_by_name(&self, name: &str) -> Option<&ManifestPatient> {
        self.patients.iter().find(|p| p.name == name)
    }

    /// Brute-force answer to a locate query: every shared record passing
    /// the filters, newest first, then by hospital and record id. Paging is
    /// ignored; this is the full result.
    pub fn locate(&self, q: &LocateQuery) -> Vec<LocateRow> {
        let mut hits: Vec<&ManifestRecord> = self
            .records
            .iter()
            .filter(|r| r.shared)
            .filter(|r| r.patient_ref == q.patient_ref)
            .filter(|r| q.date_from.timestamp() <= r.recorded_at.timestamp())
            .filter(|r| r.recorded_at.timestamp() <= q.date_to.timestamp())
            .filter(|r| q.ehr_types.is_empty() || q.ehr_types.contains(&r.ehr_type))
            .filter(|r| q.hospitals.is_empty() || q.hospitals.contains(&r.hospital_id))
            .collect();
        hits.sort_by_key(|r| (Reverse(r.recorded_at.timestamp()), r.hospital_id.clone(), r.ehr_id.clone()));
        hits.into_iter()
            .map(|r| LocateRow {
                ehr_id: r.ehr_id.clone(),
                ehr_type: r.ehr_type,
                recorded_at: r.recorded_at,
                location: r.hospital_id.clone(),
            })
            .collect()
    }

    pub fn record(&self, hospital_id: &str, ehr_id: &str) -> Option<&ManifestRecord> {
        self.records
            .iter()
            .find(|r| r.hospital_id == hospital_id && r.ehr_id == ehr_id)
    }

    pub fn raw_national_ids(&self) -> impl Iterator<Item = &str> {
        self.patients.iter().map(|p| p.national_id.as_str())
    }

    pub fn patient_names(&self) -> impl Iterator<Item = &str> {
        self.patients.iter().map(|p| p.name.as_str())
    }
}
