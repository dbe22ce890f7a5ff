use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{rfc3339, EhrType, Timestamp};

use super::mapping::{Coercion, FieldMapping};
use super::store::LegacyRow;

/// A record as a hospital knows it before any mapping: plaintext identity,
/// unified field names. Fixture generators render it into the hospital's
/// native columns with [`SourceRecord::to_row`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub national_id: String,
    pub patient_name: String,
    pub doctor_name: String,
    pub ehr_id: String,
    pub ehr_type: EhrType,
    #[serde(with = "rfc3339")]
    pub recorded_at: Timestamp,
    pub language: String,
    /// Payload values by unified payload field name (without the prefix).
    pub payload: BTreeMap<String, String>,
    pub shared: bool,
    #[serde(with = "rfc3339")]
    pub mtime: Timestamp,
    pub version: u64,
}

impl SourceRecord {
    /// Unified-named fields as raw strings, before renaming.
    pub fn unified_fields(&self, date: Coercion) -> BTreeMap<String, String> {
        let mut doc = BTreeMap::new();
        doc.insert("patient_id".to_string(), self.national_id.clone());
        doc.insert("patient_name".to_string(), self.patient_name.clone());
        doc.insert("doctor_name".to_string(), self.doctor_name.clone());
        doc.insert("ehr_id".to_string(), self.ehr_id.clone());
        doc.insert("ehr_type".to_string(), self.ehr_type.as_str().to_string());
        doc.insert(
            "recorded_at".to_string(),
            date.render_datetime(&self.recorded_at).unwrap_or_default(),
        );
        doc.insert("language".to_string(), self.language.clone());
        for (k, v) in &self.payload {
            doc.insert(format!("payload.{k}"), v.clone());
        }
        doc
    }

    pub fn to_row(&self, mapping: &FieldMapping) -> LegacyRow {
        let date = mapping.coercion_for("recorded_at").unwrap_or(Coercion::Rfc3339);
        LegacyRow {
            mtime: self.mtime,
            version: self.version,
            shared: self.shared,
            fields: mapping.rename_to_legacy(&self.unified_fields(date)),
        }
    }
}
