use std::collections::BTreeMap;

use ehrfed_core::legacy::{
    conversion_count, fixture_mapping, pairwise_plan, ConversionMode, FieldMapping, MappingRegistry, REQUIRED_TARGETS,
};
use proptest::prelude::*;

const TARGETS: [&str; 9] = [
    "patient_id",
    "ehr_id",
    "patient_name",
    "doctor_name",
    "recorded_at",
    "ehr_type",
    "language",
    "payload.notes",
    "payload.duration_min",
];

fn arb_mapping() -> impl Strategy<Value = FieldMapping> {
    prop::collection::btree_set("[a-z][a-z_]{1,10}", TARGETS.len()).prop_map(|names| {
        let pairs: Vec<(String, String)> = names
            .into_iter()
            .zip(TARGETS)
            .map(|(legacy, target)| (format!("x_{legacy}"), target.to_string()))
            .collect();
        let borrowed: Vec<(&str, &str)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        FieldMapping::new("XH", &borrowed, &[])
    })
}

proptest! {
    #[test]
    fn rename_round_trips(mapping in arb_mapping(), extra in prop::collection::btree_map("[A-Z]{3}", "[a-z0-9]{0,6}", 0..4)) {
        mapping.validate().unwrap();
        let mut doc: BTreeMap<String, String> = mapping
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.legacy.clone(), format!("v{i}")))
            .collect();
        doc.extend(extra);
        let unified = mapping.rename_to_unified(&doc);
        for t in REQUIRED_TARGETS {
            prop_assert!(unified.contains_key(t));
        }
        prop_assert_eq!(mapping.rename_to_legacy(&unified), doc);
    }
}

#[test]
fn fixture_mappings_round_trip() {
    for h in ["HC", "KW", "UH"] {
        let m = fixture_mapping(h).unwrap();
        let doc: BTreeMap<String, String> = m.entries.iter().map(|e| (e.legacy.clone(), e.unified.clone())).collect();
        assert_eq!(m.rename_to_legacy(&m.rename_to_unified(&doc)), doc, "{h}");
    }
}

#[test]
fn conversion_count_formulas() {
    for n in 0u64..=100 {
        let pairwise = conversion_count(n, ConversionMode::Pairwise);
        let unified = conversion_count(n, ConversionMode::Unified);
        assert_eq!(pairwise as i64 - unified as i64, n as i64 * (n as i64 - 2), "n={n}");
    }
}

#[test]
fn pairwise_plan_enumerates_ordered_pairs() {
    for n in 0..=30usize {
        let hospitals: Vec<String> = (0..n).map(|i| format!("H{i}")).collect();
        let plan = pairwise_plan(&hospitals);
        assert_eq!(plan.len() as u64, conversion_count(n as u64, ConversionMode::Pairwise));
        let mut dedup = plan.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), plan.len());
        assert!(plan.iter().all(|(a, b)| a != b));
    }
}

#[test]
fn three_hospital_registry_needs_three_mappings() {
    let registry = MappingRegistry::new();
    for h in ["HC", "KW", "UH"] {
        registry.register(fixture_mapping(h).unwrap()).unwrap();
    }
    assert_eq!(registry.len() as u64, conversion_count(3, ConversionMode::Unified));
    assert_eq!(pairwise_plan(&registry.hospitals()).len(), 6);
}
