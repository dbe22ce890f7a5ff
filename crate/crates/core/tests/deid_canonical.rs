use std::collections::HashSet;

use ehrfed_core::canonical::{canonical_serialize, sha256_hex, to_canonical_string};
use ehrfed_core::deid::{hash_patient_id, hash_patient_ids, normalize_national_id, FederationKey};
use ehrfed_core::model::parse_timestamp;
use ehrfed_core::{EhrType, Execution, PatientRef, UnifiedEhr};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

fn key_a() -> FederationKey {
    FederationKey::new(std::array::from_fn(|i| i as u8))
}

fn key_b() -> FederationKey {
    FederationKey::new(std::array::from_fn(|i| 0xff - i as u8))
}

/// HMAC from its definition: H((K ^ opad) || H((K ^ ipad) || m)).
fn rfc2104(key: &[u8; 32], msg: &[u8]) -> String {
    let mut block = [0u8; 64];
    block[..32].copy_from_slice(key);
    let ipad: Vec<u8> = block.iter().map(|b| b ^ 0x36).collect();
    let opad: Vec<u8> = block.iter().map(|b| b ^ 0x5c).collect();
    let inner = Sha256::new().chain_update(&ipad).chain_update(msg).finalize();
    hex::encode(Sha256::new().chain_update(&opad).chain_update(inner).finalize())
}

// Digests computed with Python's hmac module.
#[test]
fn golden_digests() {
    let cases = [
        (key_a(), "M1234567", "e9b85900081771db4c051042fb2efc9e53b249a564c703b7e130bd0293eff802"),
        (key_a(), "M7654321", "4de5976f25e81bd853f6a588a96e03c7f320617bddda45a95caefb970fbbd40d"),
        (key_b(), "M1234567", "7d7466cbee97e43315b0bb0edb078cf15479cae3aeb7ea1d1a7585d51ff86e5c"),
        (key_a(), " m-1234 567 ", "e9b85900081771db4c051042fb2efc9e53b249a564c703b7e130bd0293eff802"),
    ];
    for (key, raw, want) in cases {
        assert_eq!(hash_patient_id(raw, &key).unwrap().as_str(), want, "{raw}");
    }
}

#[test]
fn digests_unique_over_ten_thousand_ids() {
    let ids: Vec<String> = (0..10_000).map(|i| format!("M{i:07}")).collect();
    let seq = hash_patient_ids(&ids, &key_a(), Execution::Sequential);
    let par = hash_patient_ids(&ids, &key_a(), Execution::Parallel);
    let seq: Vec<PatientRef> = seq.into_iter().map(Result::unwrap).collect();
    let par: Vec<PatientRef> = par.into_iter().map(Result::unwrap).collect();
    assert_eq!(seq, par);
    assert_eq!(seq.iter().collect::<HashSet<_>>().len(), 10_000);
}

#[test]
fn key_separation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..200 {
        let k1: [u8; 32] = rng.random();
        let mut k2: [u8; 32] = rng.random();
        if k2 == k1 {
            k2[0] ^= 1;
        }
        let id = format!("ID{i}-{}", rng.random::<u32>());
        let a = hash_patient_id(&id, &FederationKey::new(k1)).unwrap();
        let b = hash_patient_id(&id, &FederationKey::new(k2)).unwrap();
        assert_ne!(a, b, "{id}");
    }
}

proptest! {
    #[test]
    fn matches_textbook_hmac(key in any::<[u8; 32]>(), raw in "[A-Za-z0-9 -]{1,24}") {
        let normalized = normalize_national_id(&raw);
        prop_assume!(!normalized.is_empty());
        let got = hash_patient_id(&raw, &FederationKey::new(key)).unwrap();
        prop_assert_eq!(got.as_str(), rfc2104(&key, normalized.as_bytes()));
    }

    #[test]
    fn digest_has_no_trace_of_input(raw in "[A-Z][0-9]{7}") {
        let got = hash_patient_id(&raw, &key_a()).unwrap();
        prop_assert!(!got.as_str().contains(&raw.to_lowercase()));
        prop_assert_eq!(got.as_str().len(), 64);
    }
}

fn kw_record() -> UnifiedEhr {
    UnifiedEhr {
        hospital_id: "KW".into(),
        ehr_id: "1043".into(),
        patient_ref: hash_patient_id("M7654321", &key_a()).unwrap(),
        patient_name: "陳美玲".into(),
        doctor_name: "Dr. Lei".into(),
        ehr_type: EhrType::Hemodialysis,
        recorded_at: parse_timestamp("2014-03-02T09:30:00+08:00").unwrap(),
        language: "zh".into(),
        payload: json!({
            "pre_weight_kg": 58.25,
            "post_weight_kg": 56.0,
            "systolic_mmHg": 128,
            "diastolic_mmHg": 79,
            "duration_min": 235,
            "dialyzer_model": "FX60",
            "notes": "血壓 \"ok\"\n",
        }),
        shared: true,
    }
}

// Expected bytes from json.dumps(sort_keys=True, separators=(",", ":"), ensure_ascii=False).
#[test]
fn canonical_bytes_match_reference_encoder() {
    let want = r#"{"doctor_name":"Dr. Lei","ehr_id":"1043","ehr_type":"hemodialysis","hospital_id":"KW","language":"zh","patient_id":"4de5976f25e81bd853f6a588a96e03c7f320617bddda45a95caefb970fbbd40d","patient_name":"陳美玲","payload":{"dialyzer_model":"FX60","diastolic_mmHg":79,"duration_min":235,"notes":"血壓 \"ok\"\n","post_weight_kg":56.0,"pre_weight_kg":58.25,"systolic_mmHg":128},"recorded_at":"2014-03-02T09:30:00+08:00","shared":true}"#;
    let bytes = canonical_serialize(&kw_record()).unwrap();
    assert_eq!(String::from_utf8(bytes.clone()).unwrap(), want);
    assert_eq!(sha256_hex(&bytes), "5e6f6fcb4d6350eb0bf76b1b1d6da7d02691444b97297f15a963b1f2dc6b2f75");
}

fn arb_record() -> impl Strategy<Value = UnifiedEhr> {
    (
        prop::sample::select(vec!["HC", "KW", "UH"]),
        "[0-9]{4}",
        "[A-Z][0-9]{7}",
        prop::sample::select(vec!["Yang Yingying", "陳美玲", "Lei Ka Man", "黃志明"]),
        0i64..7 * 365 * 86_400,
        (400u32..1200, 30u32..200, 60u32..200, 40u32..130, 60u32..300),
        "[a-z 穩定]{0,12}",
        any::<bool>(),
    )
        .prop_map(|(h, id, card, name, secs, (pre, loss, sys, dia, dur), notes, en)| UnifiedEhr {
            hospital_id: h.into(),
            ehr_id: id,
            patient_ref: hash_patient_id(&card, &key_a()).unwrap(),
            patient_name: name.into(),
            doctor_name: "Dr. Chan".into(),
            ehr_type: EhrType::Hemodialysis,
            recorded_at: parse_timestamp("2010-01-01T00:00:00+08:00").unwrap() + chrono::Duration::seconds(secs),
            language: if en { "en" } else { "zh" }.into(),
            payload: json!({
                "pre_weight_kg": pre as f64 / 10.0,
                "post_weight_kg": (pre - loss.min(pre - 1)) as f64 / 10.0,
                "systolic_mmHg": sys,
                "diastolic_mmHg": dia,
                "duration_min": dur,
                "dialyzer_model": "FX80",
                "notes": notes,
            }),
            shared: true,
        })
}

proptest! {
    #[test]
    fn canonical_round_trips(rec in arb_record()) {
        let bytes = canonical_serialize(&rec).unwrap();
        let doc: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        prop_assert_eq!(UnifiedEhr::from_document(&doc).unwrap(), rec);
        prop_assert_eq!(to_canonical_string(&doc).unwrap().into_bytes(), bytes);
    }

    #[test]
    fn canonical_is_injective(a in arb_record(), b in arb_record()) {
        let (ba, bb) = (canonical_serialize(&a).unwrap(), canonical_serialize(&b).unwrap());
        prop_assert_eq!(a == b, ba == bb);
    }
}

#[test]
fn canonical_injective_on_corpus() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let strategy = arb_record();
    let mut records = Vec::new();
    for _ in 0..2_000 {
        records.push(strategy.new_tree(&mut runner).unwrap().current());
    }
    let distinct_records: HashSet<String> = records.iter().map(|r| format!("{r:?}")).collect();
    let distinct_bytes: HashSet<Vec<u8>> = records.iter().map(|r| canonical_serialize(r).unwrap()).collect();
    assert_eq!(distinct_records.len(), distinct_bytes.len());
}
