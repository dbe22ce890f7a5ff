//! Unified EHR data model.
//!
//! Every hospital converts its legacy rows into [`UnifiedEhr`], the negotiated
//! common format. The serialized field names are the unified names
//! (`patient_id`, `ehr_id`, `patient_name`, `doctor_name`) plus the extensions
//! carried by the federation (`hospital_id`, `ehr_type`, `recorded_at`,
//! `language`, `payload`, `shared`).

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, FixedOffset, SecondsFormat};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::error::ModelError;

/// Timestamps carry their UTC offset and are compared as instants.
pub type Timestamp = DateTime<FixedOffset>;

/// Parses an RFC 3339 timestamp.
pub fn parse_timestamp(s: &str) -> Result<Timestamp, ModelError> {
    DateTime::parse_from_rfc3339(s).map_err(|e| ModelError::Timestamp {
        value: s.to_string(),
        reason: e.to_string(),
    })
}

/// Formats a timestamp as RFC 3339 with second precision.
pub fn format_timestamp(ts: &Timestamp) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Serde adapter for [`Timestamp`] fields (RFC 3339, second precision).
pub mod rfc3339 {
    use super::*;

    pub fn serialize<S: Serializer>(ts: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_timestamp(ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        let raw = String::deserialize(d)?;
        parse_timestamp(&raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EhrType {
    Hemodialysis,
    LabReport,
    RadiologyImage,
    TranscriptionReport,
    MedicationHistory,
}

impl EhrType {
    pub const ALL: [EhrType; 5] = [
        EhrType::Hemodialysis,
        EhrType::LabReport,
        EhrType::RadiologyImage,
        EhrType::TranscriptionReport,
        EhrType::MedicationHistory,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EhrType::Hemodialysis => "hemodialysis",
            EhrType::LabReport => "lab_report",
            EhrType::RadiologyImage => "radiology_image",
            EhrType::TranscriptionReport => "transcription_report",
            EhrType::MedicationHistory => "medication_history",
        }
    }
}

impl fmt::Display for EhrType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EhrType {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EhrType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ModelError::UnknownEhrType(s.to_string()))
    }
}

/// De-identified patient handle: lowercase hex of a keyed SHA-256 digest.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct PatientRef(String);

impl PatientRef {
    pub const HEX_LEN: usize = 64;

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        if is_digest_hex(s) {
            Ok(PatientRef(s.to_string()))
        } else {
            Err(ModelError::PatientRef(s.to_string()))
        }
    }

    pub(crate) fn from_digest(digest: &[u8]) -> Self {
        PatientRef(hex::encode(digest))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PatientRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for PatientRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        PatientRef::parse(&raw).map_err(serde::de::Error::custom)
    }
}

fn is_digest_hex(s: &str) -> bool {
    s.len() == PatientRef::HEX_LEN && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// Language tags accepted on records.
pub const LANGUAGES: [&str; 2] = ["zh", "en"];

/// Hemodialysis treatment session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HemodialysisPayload {
    pub pre_weight_kg: f64,
    pub post_weight_kg: f64,
    #[serde(rename = "systolic_mmHg")]
    pub systolic_mmhg: u32,
    #[serde(rename = "diastolic_mmHg")]
    pub diastolic_mmhg: u32,
    pub duration_min: u32,
    pub dialyzer_model: String,
    pub notes: String,
}

impl HemodialysisPayload {
    pub const FIELDS: [&'static str; 7] = [
        "pre_weight_kg",
        "post_weight_kg",
        "systolic_mmHg",
        "diastolic_mmHg",
        "duration_min",
        "dialyzer_model",
        "notes",
    ];
}

/// Field carried by non-hemodialysis payloads in the fixtures.
pub const SUMMARY_FIELD: &str = "summary";

/// One shared medical record in the unified format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnifiedEhr {
    pub hospital_id: String,
    pub ehr_id: String,
    #[serde(rename = "patient_id")]
    pub patient_ref: PatientRef,
    pub patient_name: String,
    pub doctor_name: String,
    pub ehr_type: EhrType,
    #[serde(with = "rfc3339")]
    pub recorded_at: Timestamp,
    pub language: String,
    pub payload: Value,
    pub shared: bool,
}

/// Top-level field names of a serialized [`UnifiedEhr`].
pub const UNIFIED_FIELDS: [&str; 10] = [
    "hospital_id",
    "ehr_id",
    "patient_id",
    "patient_name",
    "doctor_name",
    "ehr_type",
    "recorded_at",
    "language",
    "payload",
    "shared",
];

impl UnifiedEhr {
    /// Global key of the record.
    pub fn key(&self) -> (&str, &str) {
        (&self.hospital_id, &self.ehr_id)
    }

    pub fn to_document(&self) -> Value {
        serde_json::to_value(self).expect("UnifiedEhr always serializes")
    }

    /// Validates a raw document and builds the typed record from it.
    pub fn from_document(doc: &Value) -> Result<Self, ModelError> {
        let report = validate_unified(doc);
        if !report.is_ok() {
            return Err(ModelError::Invalid(report));
        }
        Ok(serde_json::from_value(doc.clone())?)
    }

    pub fn validate(&self) -> ValidationReport {
        validate_unified(&self.to_document())
    }

    pub fn hemodialysis(&self) -> Option<HemodialysisPayload> {
        match self.ehr_type {
            EhrType::Hemodialysis => serde_json::from_value(self.payload.clone()).ok(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<FieldError>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn has_error_on(&self, path: &str) -> bool {
        self.errors.iter().any(|e| e.path == path)
    }

    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.errors.push(FieldError {
            path: path.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.errors.is_empty() {
            return f.write_str("ok");
        }
        for (i, e) in self.errors.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: {}", e.path, e.message)?;
        }
        Ok(())
    }
}

/// Checks every invariant of the unified format on a raw document.
pub fn validate_unified(doc: &Value) -> ValidationReport {
    let mut report = ValidationReport::default();
    let Some(obj) = doc.as_object() else {
        report.push("", "record must be an object");
        return report;
    };

    for key in obj.keys() {
        if !UNIFIED_FIELDS.contains(&key.as_str()) {
            report.push(key.clone(), "unexpected field (not a unified field name)");
        }
    }

    for field in ["hospital_id", "ehr_id", "patient_name", "doctor_name"] {
        match obj.get(field) {
            None => report.push(field, "missing"),
            Some(Value::String(s)) if s.trim().is_empty() => report.push(field, "empty"),
            Some(Value::String(_)) => {}
            Some(_) => report.push(field, "expected string"),
        }
    }

    match obj.get("patient_id") {
        None => report.push("patient_id", "missing"),
        Some(Value::String(s)) if is_digest_hex(s) => {}
        Some(_) => report.push("patient_id", "expected 64 lowercase hex characters"),
    }

    let ehr_type = match obj.get("ehr_type") {
        None => {
            report.push("ehr_type", "missing");
            None
        }
        Some(Value::String(s)) => match s.parse::<EhrType>() {
            Ok(t) => Some(t),
            Err(_) => {
                report.push("ehr_type", format!("unknown type {s:?}"));
                None
            }
        },
        Some(_) => {
            report.push("ehr_type", "expected string");
            None
        }
    };

    match obj.get("recorded_at") {
        None => report.push("recorded_at", "missing"),
        Some(Value::String(s)) => {
            if let Err(e) = parse_timestamp(s) {
                report.push("recorded_at", e.to_string());
            }
        }
        Some(_) => report.push("recorded_at", "expected RFC 3339 string"),
    }

    match obj.get("language") {
        None => report.push("language", "missing"),
        Some(Value::String(s)) if LANGUAGES.contains(&s.as_str()) => {}
        Some(_) => report.push("language", "expected \"zh\" or \"en\""),
    }

    match obj.get("shared") {
        None => report.push("shared", "missing"),
        Some(Value::Bool(_)) => {}
        Some(_) => report.push("shared", "expected boolean"),
    }

    match obj.get("payload") {
        None => report.push("payload", "missing"),
        Some(Value::Object(payload)) => {
            if ehr_type == Some(EhrType::Hemodialysis) {
                validate_hemodialysis(payload, &mut report);
            }
        }
        Some(_) => report.push("payload", "expected object"),
    }

    report
}

fn validate_hemodialysis(payload: &Map<String, Value>, report: &mut ValidationReport) {
    for field in ["pre_weight_kg", "post_weight_kg"] {
        let path = format!("payload.{field}");
        match payload.get(field).and_then(Value::as_f64) {
            None => report.push(path, "expected number"),
            Some(v) if v < 0.0 || !v.is_finite() => report.push(path, "must be >= 0"),
            Some(_) => {}
        }
    }
    for field in ["systolic_mmHg", "diastolic_mmHg", "duration_min"] {
        let path = format!("payload.{field}");
        match payload.get(field).and_then(Value::as_u64) {
            None => report.push(path, "expected positive integer"),
            Some(0) => report.push(path, "must be > 0"),
            Some(v) if v > u32::MAX as u64 => report.push(path, "out of range"),
            Some(_) => {}
        }
    }
    for field in ["dialyzer_model", "notes"] {
        if !matches!(payload.get(field), Some(Value::String(_))) {
            report.push(format!("payload.{field}"), "expected string");
        }
    }
    for key in payload.keys() {
        if !HemodialysisPayload::FIELDS.contains(&key.as_str()) {
            report.push(format!("payload.{key}"), "unexpected field");
        }
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use serde_json::json;

    pub fn yang_ref() -> PatientRef {
        PatientRef::parse("e9b85900081771db4c051042fb2efc9e53b249a564c703b7e130bd0293eff802").unwrap()
    }

    pub fn hemodialysis_record() -> UnifiedEhr {
        UnifiedEhr {
            hospital_id: "HC".into(),
            ehr_id: "0221".into(),
            patient_ref: yang_ref(),
            patient_name: "Yang Yingying".into(),
            doctor_name: "Dr. Chan".into(),
            ehr_type: EhrType::Hemodialysis,
            recorded_at: parse_timestamp("2015-09-30T10:00:00+08:00").unwrap(),
            language: "en".into(),
            payload: json!({
                "pre_weight_kg": 61.5,
                "post_weight_kg": 59.0,
                "systolic_mmHg": 132,
                "diastolic_mmHg": 81,
                "duration_min": 240,
                "dialyzer_model": "FX80",
                "notes": "穩定 stable",
            }),
            shared: true,
        }
    }
}
