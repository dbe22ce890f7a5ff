use serde_json::{Map, Number, Value};

use crate::deid::{hash_patient_id, FederationKey};
use crate::exec::Execution;
use crate::model::{format_timestamp, UnifiedEhr};

use super::mapping::{Coercion, FieldMapping, MappingRegistry, REQUIRED_TARGETS};
use super::store::LegacyRecord;
use super::LegacyError;

const DEFAULT_LANGUAGE: &str = "zh";

/// Converts one legacy record into the unified format. The legacy identity
/// value is replaced by its keyed digest and never copied into the output.
pub fn convert(
    registry: &MappingRegistry,
    record: &LegacyRecord,
    key: &FederationKey,
) -> Result<UnifiedEhr, LegacyError> {
    let mapping = registry
        .get(&record.hospital_id)
        .ok_or_else(|| LegacyError::Unregistered(record.hospital_id.clone()))?;
    convert_with(&mapping, record, key)
}

pub fn convert_batch(
    registry: &MappingRegistry,
    records: &[LegacyRecord],
    key: &FederationKey,
    exec: Execution,
) -> Vec<Result<UnifiedEhr, LegacyError>> {
    exec.map(records, |r| convert(registry, r, key))
}

fn convert_with(
    mapping: &FieldMapping,
    record: &LegacyRecord,
    key: &FederationKey,
) -> Result<UnifiedEhr, LegacyError> {
    let unified = mapping.rename_to_unified(&record.document);
    let required = |name: &str| -> Result<&String, LegacyError> {
        unified.get(name).ok_or_else(|| LegacyError::MissingField {
            legacy: mapping.legacy_for(name).unwrap_or(name).to_string(),
            unified: name.to_string(),
        })
    };
    for name in REQUIRED_TARGETS {
        required(name)?;
    }

    let patient_ref = hash_patient_id(required("patient_id")?, key)?;

    let raw_date = required("recorded_at")?;
    let recorded_at = mapping
        .coercion_for("recorded_at")
        .unwrap_or(Coercion::Rfc3339)
        .parse_datetime(raw_date)
        .ok_or_else(|| LegacyError::Unparseable {
            field: "recorded_at".into(),
            value: raw_date.clone(),
        })?;

    let mut payload = Map::new();
    for (name, raw) in &unified {
        let Some(field) = name.strip_prefix("payload.") else {
            continue;
        };
        let value = match mapping.coercion_for(name) {
            Some(Coercion::Decimal) => raw
                .trim()
                .parse::<f64>()
                .ok()
                .and_then(Number::from_f64)
                .map(Value::Number),
            Some(Coercion::Integer) => raw.trim().parse::<u64>().ok().map(Value::from),
            _ => Some(Value::String(raw.clone())),
        }
        .ok_or_else(|| LegacyError::Unparseable {
            field: name.clone(),
            value: raw.clone(),
        })?;
        payload.insert(field.to_string(), value);
    }

    let mut doc = Map::new();
    doc.insert("hospital_id".into(), Value::from(record.hospital_id.as_str()));
    doc.insert("ehr_id".into(), Value::from(required("ehr_id")?.trim()));
    doc.insert("patient_id".into(), Value::from(patient_ref.as_str()));
    doc.insert("patient_name".into(), Value::from(required("patient_name")?.as_str()));
    doc.insert("doctor_name".into(), Value::from(required("doctor_name")?.as_str()));
    doc.insert("ehr_type".into(), Value::from(required("ehr_type")?.trim()));
    doc.insert("recorded_at".into(), Value::from(format_timestamp(&recorded_at)));
    doc.insert(
        "language".into(),
        Value::from(unified.get("language").map(String::as_str).unwrap_or(DEFAULT_LANGUAGE)),
    );
    doc.insert("payload".into(), Value::Object(payload));
    doc.insert("shared".into(), Value::Bool(true));

    let doc = Value::Object(doc);
    let report = crate::model::validate_unified(&doc);
    if !report.is_ok() {
        return Err(LegacyError::Invalid(report));
    }
    Ok(serde_json::from_value(doc)?)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use serde_json::json;

    use super::*;
    use crate::canonical::canonical_serialize;
    use crate::legacy::fixture_mapping;
    use crate::model::{parse_timestamp, EhrType, PatientRef};

    fn test_key() -> FederationKey {
        let mut k = [0u8; 32];
        for (i, b) in k.iter_mut().enumerate() {
            *b = i as u8;
        }
        FederationKey::new(k)
    }

    // HMAC-SHA-256(key = 00..1f, "M1234567"), computed with Python's hmac module
    const YANG_DIGEST: &str = "e9b85900081771db4c051042fb2efc9e53b249a564c703b7e130bd0293eff802";

    fn doc(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn record(hospital: &str, document: BTreeMap<String, String>) -> LegacyRecord {
        LegacyRecord {
            hospital_id: hospital.into(),
            document,
            modified_at: parse_timestamp("2015-10-01T00:00:00+08:00").unwrap(),
            version: 1,
        }
    }

    fn registry() -> MappingRegistry {
        let reg = MappingRegistry::new();
        for h in ["HC", "KW", "UH"] {
            reg.register(fixture_mapping(h).unwrap()).unwrap();
        }
        reg
    }

    fn hc_yang() -> LegacyRecord {
        record(
            "HC",
            doc(&[
                ("card_id", "M1234567"),
                ("record_id", "0221"),
                ("p_name", "Yang Yingying"),
                ("d_name", "Dr. Chan"),
                ("visit_time", "2015-09-30 10:00"),
                ("rec_type", "hemodialysis"),
                ("lang", "en"),
                ("pre_wt", "61.5"),
                ("post_wt", "59.0"),
                ("bp_sys", "132"),
                ("bp_dia", "81"),
                ("dur_min", "240"),
                ("dialyzer", "FX80"),
                ("memo", "stable"),
            ]),
        )
    }

    #[test]
    fn hc_record_converts() {
        let out = convert(&registry(), &hc_yang(), &test_key()).unwrap();
        assert_eq!(out.patient_ref.as_str(), YANG_DIGEST);
        assert_eq!(out.ehr_id, "0221");
        assert_eq!(out.patient_name, "Yang Yingying");
        assert_eq!(out.doctor_name, "Dr. Chan");
        assert_eq!(out.recorded_at, parse_timestamp("2015-09-30T10:00:00+08:00").unwrap());
        assert!(out.validate().is_ok());
        let hd = out.hemodialysis().unwrap();
        assert_eq!(hd.pre_weight_kg, 61.5);
        assert_eq!(hd.duration_min, 240);
    }

    #[test]
    fn kw_record_matches_hand_built() {
        let legacy = record(
            "KW",
            doc(&[
                ("identitiy_id", "m7654321"),
                ("id_ehr", "1043"),
                ("patient_n", "陳美玲"),
                ("dotctor_n", "Dr. Leong"),
                ("data_hora", "02/03/2014 09:30"),
                ("tipo", "hemodialysis"),
                ("lingua", "zh"),
                ("peso_pre", "70.2"),
                ("peso_pos", "68.4"),
                ("pa_sis", "140"),
                ("pa_dia", "90"),
                ("duracao", "225"),
                ("dialisador", "Rexeed-18"),
                ("obs", "無不適"),
                ("cama", "12"),
            ]),
        );
        let expected = UnifiedEhr {
            hospital_id: "KW".into(),
            ehr_id: "1043".into(),
            // HMAC-SHA-256(key = 00..1f, "M7654321"), Python hmac module
            patient_ref: PatientRef::parse(
                "4de5976f25e81bd853f6a588a96e03c7f320617bddda45a95caefb970fbbd40d",
            )
            .unwrap(),
            patient_name: "陳美玲".into(),
            doctor_name: "Dr. Leong".into(),
            ehr_type: EhrType::Hemodialysis,
            recorded_at: parse_timestamp("2014-03-02T09:30:00+08:00").unwrap(),
            language: "zh".into(),
            payload: json!({
                "pre_weight_kg": 70.2,
                "post_weight_kg": 68.4,
                "systolic_mmHg": 140,
                "diastolic_mmHg": 90,
                "duration_min": 225,
                "dialyzer_model": "Rexeed-18",
                "notes": "無不適",
            }),
            shared: true,
        };
        assert_eq!(convert(&registry(), &legacy, &test_key()).unwrap(), expected);
    }

    #[test]
    fn identity_mapping_keeps_values() {
        let reg = MappingRegistry::new();
        let names = [
            "patient_id",
            "ehr_id",
            "patient_name",
            "doctor_name",
            "recorded_at",
            "ehr_type",
        ];
        let pairs: Vec<(&str, &str)> = names.iter().map(|n| (*n, *n)).collect();
        reg.register(FieldMapping::new("XH", &pairs, &[])).unwrap();
        let legacy = record(
            "XH",
            doc(&[
                ("patient_id", "M1234567"),
                ("ehr_id", "77"),
                ("patient_name", "Yang Yingying"),
                ("doctor_name", "Dr. Chan"),
                ("recorded_at", "2015-09-30T10:00:00+08:00"),
                ("ehr_type", "lab_report"),
            ]),
        );
        let out = convert(&reg, &legacy, &test_key()).unwrap();
        assert_eq!(out.ehr_id, "77");
        assert_eq!(out.patient_name, "Yang Yingying");
        assert_eq!(out.doctor_name, "Dr. Chan");
        assert_eq!(out.ehr_type, EhrType::LabReport);
        assert_eq!(out.patient_ref.as_str(), YANG_DIGEST);
        assert_eq!(out.language, DEFAULT_LANGUAGE);
    }

    #[test]
    fn raw_identity_never_in_output() {
        let out = convert(&registry(), &hc_yang(), &test_key()).unwrap();
        let bytes = canonical_serialize(&out).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(!text.contains("M1234567"));
    }

    #[test]
    fn conversion_errors() {
        let reg = registry();
        let key = test_key();

        let mut r = hc_yang();
        r.hospital_id = "ZZ".into();
        assert!(matches!(convert(&reg, &r, &key), Err(LegacyError::Unregistered(h)) if h == "ZZ"));

        let mut r = hc_yang();
        r.document.remove("d_name");
        assert!(matches!(
            convert(&reg, &r, &key),
            Err(LegacyError::MissingField { legacy, .. }) if legacy == "d_name"
        ));

        let mut r = hc_yang();
        r.document.insert("visit_time".into(), "2015-13-40 10:00".into());
        assert!(matches!(
            convert(&reg, &r, &key),
            Err(LegacyError::Unparseable { field, .. }) if field == "recorded_at"
        ));

        let mut r = hc_yang();
        r.document.insert("bp_sys".into(), "high".into());
        assert!(matches!(convert(&reg, &r, &key), Err(LegacyError::Unparseable { .. })));

        let mut r = hc_yang();
        r.document.insert("rec_type".into(), "ct_scan".into());
        assert!(matches!(convert(&reg, &r, &key), Err(LegacyError::Invalid(_))));

        let mut r = hc_yang();
        r.document.insert("card_id".into(), " - ".into());
        assert!(matches!(convert(&reg, &r, &key), Err(LegacyError::Identity(_))));
    }

    #[test]
    fn uh_epoch_dates() {
        let legacy = record(
            "UH",
            doc(&[
                ("id", "M1234567"),
                ("eid", "0005"),
                ("pname", "Yang Yingying"),
                ("dname", "Dr. Ho"),
                ("ts", "1443578700"),
                ("kind", "transcription_report"),
                ("language", "en"),
                ("abstract", "follow-up"),
            ]),
        );
        let out = convert(&registry(), &legacy, &test_key()).unwrap();
        assert_eq!(out.recorded_at, parse_timestamp("2015-09-30T10:05:00+08:00").unwrap());
        assert_eq!(out.payload, json!({"summary": "follow-up"}));
    }

    #[test]
    fn batch_modes_agree() {
        let reg = registry();
        let records: Vec<LegacyRecord> = (0..50)
            .map(|i| {
                let mut r = hc_yang();
                r.document.insert("record_id".into(), format!("{i:04}"));
                r
            })
            .collect();
        let key = test_key();
        let seq: Vec<UnifiedEhr> = convert_batch(&reg, &records, &key, Execution::Sequential)
            .into_iter()
            .map(Result::unwrap)
            .collect();
        let par: Vec<UnifiedEhr> = convert_batch(&reg, &records, &key, Execution::Parallel)
            .into_iter()
            .map(Result::unwrap)
            .collect();
        assert_eq!(seq, par);
    }
}
