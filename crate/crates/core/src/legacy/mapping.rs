use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, RwLock};

use chrono::{DateTime, FixedOffset, NaiveDateTime, TimeZone};
use serde::{Deserialize, Serialize};

use crate::model::{format_timestamp, parse_timestamp, HemodialysisPayload, Timestamp, SUMMARY_FIELD};

use super::LegacyError;

/// Unified fields every mapping must produce.
pub const REQUIRED_TARGETS: [&str; 6] = [
    "patient_id",
    "ehr_id",
    "patient_name",
    "doctor_name",
    "recorded_at",
    "ehr_type",
];

/// Offset of the naive local times stored by the legacy systems (Macau).
pub const LEGACY_LOCAL_OFFSET_SECS: i32 = 8 * 3600;

const PAYLOAD_PREFIX: &str = "payload.";

/// Returns true if `name` is a valid mapping target.
pub fn is_unified_target(name: &str) -> bool {
    if REQUIRED_TARGETS.contains(&name) || name == "language" {
        return true;
    }
    match name.strip_prefix(PAYLOAD_PREFIX) {
        Some(field) => HemodialysisPayload::FIELDS.contains(&field) || field == SUMMARY_FIELD,
        None => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub legacy: String,
    pub unified: String,
}

/// Declared type conversion for a unified field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCoercion {
    /// Unified field name the coercion applies to.
    pub field: String,
    pub from: String,
    pub to: String,
}

/// Parsed form of a [`TypeCoercion`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coercion {
    /// Naive local date-time with the given chrono format, to RFC 3339.
    LocalDateTime(&'static str),
    EpochSeconds,
    Rfc3339,
    Decimal,
    Integer,
    Text,
}

const DATE_FORMATS: [(&str, &str); 2] = [
    ("yyyy-MM-dd HH:mm", "%Y-%m-%d %H:%M"),
    ("dd/MM/yyyy HH:mm", "%d/%m/%Y %H:%M"),
];

impl Coercion {
    pub fn parse(c: &TypeCoercion) -> Result<Coercion, LegacyError> {
        let bad = || LegacyError::Coercion {
            field: c.field.clone(),
            from: c.from.clone(),
            to: c.to.clone(),
        };
        let coercion = match (c.from.as_str(), c.to.as_str()) {
            ("epoch_seconds", "rfc3339") => Coercion::EpochSeconds,
            ("rfc3339", "rfc3339") => Coercion::Rfc3339,
            (from, "rfc3339") => DATE_FORMATS
                .iter()
                .find(|(name, _)| *name == from)
                .map(|(_, fmt)| Coercion::LocalDateTime(fmt))
                .ok_or_else(bad)?,
            ("string", "decimal") | ("decimal", "decimal") => Coercion::Decimal,
            ("string", "integer") | ("integer", "integer") => Coercion::Integer,
            ("string", "string") => Coercion::Text,
            _ => return Err(bad()),
        };
        let is_date = matches!(
            coercion,
            Coercion::LocalDateTime(_) | Coercion::EpochSeconds | Coercion::Rfc3339
        );
        if is_date != (c.field == "recorded_at") {
            return Err(bad());
        }
        Ok(coercion)
    }

    fn local_offset() -> FixedOffset {
        FixedOffset::east_opt(LEGACY_LOCAL_OFFSET_SECS).expect("valid offset")
    }

    pub fn parse_datetime(self, value: &str) -> Option<Timestamp> {
        match self {
            Coercion::LocalDateTime(fmt) => {
                let naive = NaiveDateTime::parse_from_str(value.trim(), fmt).ok()?;
                Self::local_offset().from_local_datetime(&naive).single()
            }
            Coercion::EpochSeconds => {
                let secs: i64 = value.trim().parse().ok()?;
                let utc = DateTime::from_timestamp(secs, 0)?;
                Some(utc.with_timezone(&Self::local_offset()))
            }
            Coercion::Rfc3339 => parse_timestamp(value.trim()).ok(),
            _ => None,
        }
    }

    /// Inverse of [`Coercion::parse_datetime`], used to render legacy fixtures.
    pub fn render_datetime(self, ts: &Timestamp) -> Option<String> {
        let local = ts.with_timezone(&Self::local_offset());
        match self {
            Coercion::LocalDateTime(fmt) => Some(local.format(fmt).to_string()),
            Coercion::EpochSeconds => Some(ts.timestamp().to_string()),
            Coercion::Rfc3339 => Some(format_timestamp(&local)),
            _ => None,
        }
    }
}

/// Per-hospital mapping from legacy column names to unified field names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMapping {
    pub hospital_id: String,
    pub entries: Vec<MappingEntry>,
    #[serde(default)]
    pub type_coercions: Vec<TypeCoercion>,
}

impl FieldMapping {
    pub fn new(hospital_id: &str, pairs: &[(&str, &str)], coercions: &[(&str, &str, &str)]) -> Self {
        FieldMapping {
            hospital_id: hospital_id.to_string(),
            entries: pairs
                .iter()
                .map(|(legacy, unified)| MappingEntry {
                    legacy: legacy.to_string(),
                    unified: unified.to_string(),
                })
                .collect(),
            type_coercions: coercions
                .iter()
                .map(|(field, from, to)| TypeCoercion {
                    field: field.to_string(),
                    from: from.to_string(),
                    to: to.to_string(),
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<FieldMapping, LegacyError> {
        let text = std::fs::read_to_string(path).map_err(|e| LegacyError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<(), LegacyError> {
        if self.hospital_id.trim().is_empty() {
            return Err(LegacyError::InvalidMapping("empty hospital_id".into()));
        }
        let mut legacy_seen = BTreeSet::new();
        let mut unified_seen = BTreeSet::new();
        for e in &self.entries {
            if !legacy_seen.insert(e.legacy.as_str()) {
                return Err(LegacyError::DuplicateLegacyField(e.legacy.clone()));
            }
            if !is_unified_target(&e.unified) {
                return Err(LegacyError::UnknownTarget(e.unified.clone()));
            }
            if !unified_seen.insert(e.unified.as_str()) {
                return Err(LegacyError::DuplicateTarget(e.unified.clone()));
            }
        }
        let missing: Vec<String> = REQUIRED_TARGETS
            .iter()
            .filter(|t| !unified_seen.contains(**t))
            .map(|t| t.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(LegacyError::MissingRequiredTargets(missing));
        }
        let mut coerced = BTreeSet::new();
        for c in &self.type_coercions {
            Coercion::parse(c)?;
            if !coerced.insert(c.field.as_str()) {
                return Err(LegacyError::InvalidMapping(format!(
                    "more than one coercion for {}",
                    c.field
                )));
            }
        }
        Ok(())
    }

    pub fn legacy_for(&self, unified: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.unified == unified)
            .map(|e| e.legacy.as_str())
    }

    pub fn coercion_for(&self, unified: &str) -> Option<Coercion> {
        self.type_coercions
            .iter()
            .find(|c| c.field == unified)
            .and_then(|c| Coercion::parse(c).ok())
    }

    /// Renames legacy keys to unified keys; unmapped keys pass through.
    pub fn rename_to_unified(&self, doc: &BTreeMap<String, String>) -> BTreeMap<String, String> {
        let lookup: HashMap<&str, &str> = self
            .entries
            .iter()
            .map(|e| (e.legacy.as_str(), e.unified.as_str()))
            .collect();
        rename(doc, &lookup)
    }

    /// Inverse of [`FieldMapping::rename_to_unified`].
    pub fn rename_to_legacy(&self, doc: &BTreeMap<String, String>) -> BTreeMap<String, String> {
        let lookup: HashMap<&str, &str> = self
            .entries
            .iter()
            .map(|e| (e.unified.as_str(), e.legacy.as_str()))
            .collect();
        rename(doc, &lookup)
    }
}

fn rename(doc: &BTreeMap<String, String>, lookup: &HashMap<&str, &str>) -> BTreeMap<String, String> {
    doc.iter()
        .map(|(k, v)| {
            let name = lookup.get(k.as_str()).copied().unwrap_or(k.as_str());
            (name.to_string(), v.clone())
        })
        .collect()
}

/// Registered mappings by hospital. Lookups are concurrent; registration
/// replaces the whole mapping for a hospital at once.
#[derive(Debug, Default)]
pub struct MappingRegistry {
    mappings: RwLock<HashMap<String, Arc<FieldMapping>>>,
}

impl MappingRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, mapping: FieldMapping) -> Result<Arc<FieldMapping>, LegacyError> {
        mapping.validate()?;
        let handle = Arc::new(mapping);
        self.mappings
            .write()
            .expect("mapping registry poisoned")
            .insert(handle.hospital_id.clone(), Arc::clone(&handle));
        Ok(handle)
    }

    pub fn get(&self, hospital_id: &str) -> Option<Arc<FieldMapping>> {
        self.mappings
            .read()
            .expect("mapping registry poisoned")
            .get(hospital_id)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.mappings.read().expect("mapping registry poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hospitals(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .mappings
            .read()
            .expect("mapping registry poisoned")
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }
}

/// Conversion strategy compared in the unified-format argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConversionMode {
    /// Every ordered pair of hospitals needs its own converter.
    Pairwise,
    /// Every hospital converts once, to the shared format.
    Unified,
}

pub fn conversion_count(hospitals: u64, mode: ConversionMode) -> u64 {
    match mode {
        ConversionMode::Pairwise => hospitals * hospitals.saturating_sub(1),
        ConversionMode::Unified => hospitals,
    }
}

/// All ordered (source, target) converter pairs a pairwise plan would need.
pub fn pairwise_plan(hospitals: &[String]) -> Vec<(String, String)> {
    hospitals
        .iter()
        .flat_map(|from| {
            hospitals
                .iter()
                .filter(move |to| *to != from)
                .map(move |to| (from.clone(), to.clone()))
        })
        .collect()
}

/// Mappings for the three fixture hospitals. Identity-bearing columns follow
/// the published table verbatim, including KW's spellings.
pub fn fixture_mapping(hospital_id: &str) -> Option<FieldMapping> {
    let numeric = [
        ("payload.pre_weight_kg", "string", "decimal"),
        ("payload.post_weight_kg", "string", "decimal"),
        ("payload.systolic_mmHg", "string", "integer"),
        ("payload.diastolic_mmHg", "string", "integer"),
        ("payload.duration_min", "string", "integer"),
    ];
    let mapping = match hospital_id {
        "HC" => {
            let mut coercions = vec![("recorded_at", "yyyy-MM-dd HH:mm", "rfc3339")];
            coercions.extend(numeric);
            FieldMapping::new(
                "HC",
                &[
                    ("card_id", "patient_id"),
                    ("record_id", "ehr_id"),
                    ("p_name", "patient_name"),
                    ("d_name", "doctor_name"),
                    ("visit_time", "recorded_at"),
                    ("rec_type", "ehr_type"),
                    ("lang", "language"),
                    ("pre_wt", "payload.pre_weight_kg"),
                    ("post_wt", "payload.post_weight_kg"),
                    ("bp_sys", "payload.systolic_mmHg"),
                    ("bp_dia", "payload.diastolic_mmHg"),
                    ("dur_min", "payload.duration_min"),
                    ("dialyzer", "payload.dialyzer_model"),
                    ("memo", "payload.notes"),
                    ("summary_text", "payload.summary"),
                ],
                &coercions,
            )
        }
        "KW" => {
            let mut coercions = vec![("recorded_at", "dd/MM/yyyy HH:mm", "rfc3339")];
            coercions.extend(numeric);
            FieldMapping::new(
                "KW",
                &[
                    ("identitiy_id", "patient_id"),
                    ("id_ehr", "ehr_id"),
                    ("patient_n", "patient_name"),
                    ("dotctor_n", "doctor_name"),
                    ("data_hora", "recorded_at"),
                    ("tipo", "ehr_type"),
                    ("lingua", "language"),
                    ("peso_pre", "payload.pre_weight_kg"),
                    ("peso_pos", "payload.post_weight_kg"),
                    ("pa_sis", "payload.systolic_mmHg"),
                    ("pa_dia", "payload.diastolic_mmHg"),
                    ("duracao", "payload.duration_min"),
                    ("dialisador", "payload.dialyzer_model"),
                    ("obs", "payload.notes"),
                    ("resumo", "payload.summary"),
                ],
                &coercions,
            )
        }
        "UH" => {
            let mut coercions = vec![("recorded_at", "epoch_seconds", "rfc3339")];
            coercions.extend(numeric);
            FieldMapping::new(
                "UH",
                &[
                    ("id", "patient_id"),
                    ("eid", "ehr_id"),
                    ("pname", "patient_name"),
                    ("dname", "doctor_name"),
                    ("ts", "recorded_at"),
                    ("kind", "ehr_type"),
                    ("language", "language"),
                    ("wt_before", "payload.pre_weight_kg"),
                    ("wt_after", "payload.post_weight_kg"),
                    ("sys", "payload.systolic_mmHg"),
                    ("dia", "payload.diastolic_mmHg"),
                    ("minutes", "payload.duration_min"),
                    ("filter_model", "payload.dialyzer_model"),
                    ("remarks", "payload.notes"),
                    ("abstract", "payload.summary"),
                ],
                &coercions,
            )
        }
        _ => return None,
    };
    Some(mapping)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_one_hc() -> FieldMapping {
        FieldMapping::new(
            "HC",
            &[
                ("card_id", "patient_id"),
                ("record_id", "ehr_id"),
                ("p_name", "patient_name"),
                ("d_name", "doctor_name"),
                ("visit_time", "recorded_at"),
                ("rec_type", "ehr_type"),
            ],
            &[("recorded_at", "yyyy-MM-dd HH:mm", "rfc3339")],
        )
    }

    #[test]
    fn hc_table_mapping_accepted() {
        let reg = MappingRegistry::new();
        let handle = reg.register(table_one_hc()).unwrap();
        assert_eq!(handle.legacy_for("patient_id"), Some("card_id"));
        assert_eq!(reg.get("HC").unwrap().entries.len(), 6);
    }

    #[test]
    fn kw_spelling_accepted_verbatim() {
        let reg = MappingRegistry::new();
        let kw = fixture_mapping("KW").unwrap();
        reg.register(kw).unwrap();
        let kw = reg.get("KW").unwrap();
        assert_eq!(kw.legacy_for("doctor_name"), Some("dotctor_n"));
        assert_eq!(kw.legacy_for("patient_id"), Some("identitiy_id"));
    }

    #[test]
    fn missing_ehr_id_rejected() {
        let mut m = table_one_hc();
        m.entries.retain(|e| e.unified != "ehr_id");
        match MappingRegistry::new().register(m) {
            Err(LegacyError::MissingRequiredTargets(missing)) => assert_eq!(missing, vec!["ehr_id"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn four_entry_mapping_lacks_date_and_type() {
        let mut m = table_one_hc();
        m.entries.truncate(4);
        match m.validate() {
            Err(LegacyError::MissingRequiredTargets(missing)) => {
                assert_eq!(missing, vec!["recorded_at", "ehr_type"])
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_legacy_and_unknown_target_rejected() {
        let mut m = table_one_hc();
        m.entries.push(MappingEntry {
            legacy: "card_id".into(),
            unified: "payload.notes".into(),
        });
        assert!(matches!(m.validate(), Err(LegacyError::DuplicateLegacyField(f)) if f == "card_id"));

        let mut m = table_one_hc();
        m.entries.push(MappingEntry {
            legacy: "x".into(),
            unified: "blood_type".into(),
        });
        assert!(matches!(m.validate(), Err(LegacyError::UnknownTarget(_))));
    }

    #[test]
    fn bad_coercions_rejected() {
        let mut m = table_one_hc();
        m.type_coercions[0].from = "MM-dd-yy".into();
        assert!(matches!(m.validate(), Err(LegacyError::Coercion { .. })));
        let mut m = table_one_hc();
        m.type_coercions[0].field = "payload.notes".into();
        assert!(m.validate().is_err());
    }

    #[test]
    fn reregistration_replaces() {
        let reg = MappingRegistry::new();
        reg.register(table_one_hc()).unwrap();
        reg.register(fixture_mapping("HC").unwrap()).unwrap();
        assert_eq!(reg.len(), 1);
        assert_eq!(reg.get("HC").unwrap().legacy_for("language"), Some("lang"));
    }

    #[test]
    fn fixture_mappings_valid() {
        for h in ["HC", "KW", "UH"] {
            fixture_mapping(h).unwrap().validate().unwrap();
        }
        assert!(fixture_mapping("XX").is_none());
    }

    #[test]
    fn conversion_counts() {
        assert_eq!(conversion_count(3, ConversionMode::Pairwise), 6);
        assert_eq!(conversion_count(3, ConversionMode::Unified), 3);
        assert_eq!(conversion_count(1, ConversionMode::Pairwise), 0);
        assert_eq!(conversion_count(0, ConversionMode::Pairwise), 0);
        let hs: Vec<String> = ["HC", "KW", "UH"].iter().map(|s| s.to_string()).collect();
        assert_eq!(pairwise_plan(&hs).len(), 6);
    }

    #[test]
    fn date_coercions_round_trip() {
        let ts = parse_timestamp("2015-09-30T10:05:00+08:00").unwrap();
        for (from, rendered) in [
            ("yyyy-MM-dd HH:mm", "2015-09-30 10:05"),
            ("dd/MM/yyyy HH:mm", "30/09/2015 10:05"),
            ("epoch_seconds", "1443578700"),
        ] {
            let c = Coercion::parse(&TypeCoercion {
                field: "recorded_at".into(),
                from: from.into(),
                to: "rfc3339".into(),
            })
            .unwrap();
            assert_eq!(c.render_datetime(&ts).unwrap(), rendered);
            assert_eq!(c.parse_datetime(rendered).unwrap(), ts);
        }
    }
}
