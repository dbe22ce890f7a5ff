use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use ehrfed_core::auth::{ConsentClaims, DoctorClaims, KeyRing, Rejection, Role, SigningKey};
use ehrfed_core::deid::{hash_patient_id, FederationKey};
use ehrfed_core::model::parse_timestamp;
use ehrfed_core::{EhrType, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn now() -> Timestamp {
    parse_timestamp("2016-05-01T09:00:00+08:00").unwrap()
}

fn ring() -> KeyRing {
    let mut ring = KeyRing::new();
    ring.insert("HC", SigningKey::new([0x42; 32]));
    ring.insert("KW", SigningKey::new([0x17; 32]));
    ring
}

fn consent() -> ConsentClaims {
    let iat = now().timestamp();
    ConsentClaims {
        patient_ref: hash_patient_id("M1234567", &FederationKey::new([1; 32])).unwrap(),
        granted_to: "dr-chan".into(),
        hospital_id: "HC".into(),
        scope_from: parse_timestamp("2010-01-01T00:00:00+08:00").unwrap().timestamp(),
        scope_to: parse_timestamp("2016-12-31T00:00:00+08:00").unwrap().timestamp(),
        scope_types: EhrType::ALL.to_vec(),
        iat,
        exp: iat + 900,
    }
}

#[test]
fn mutated_claim_bytes_never_verify() {
    let ring = ring();
    let token = ring.sign(&consent()).unwrap();
    assert!(ring.verify::<ConsentClaims>(&token, &now()).is_ok());
    let parts: Vec<&str> = token.split('.').collect();
    let claims = URL_SAFE_NO_PAD.decode(parts[1]).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let mut rejected = 0;
    for _ in 0..1_000 {
        let mut bytes = claims.clone();
        let pos = rng.random_range(0..bytes.len());
        let flip = rng.random_range(1..=255u8);
        bytes[pos] ^= flip;
        let forged = format!("{}.{}.{}", parts[0], URL_SAFE_NO_PAD.encode(&bytes), parts[2]);
        match ring.verify::<ConsentClaims>(&forged, &now()) {
            Err(Rejection::BadSignature) => rejected += 1,
            other => panic!("mutation at {pos} gave {other:?}"),
        }
    }
    assert_eq!(rejected, 1_000);
}

#[test]
fn mutated_token_characters_never_verify() {
    let ring = ring();
    let doctor = DoctorClaims {
        sub: "dr-chan".into(),
        role: Role::Doctor,
        hospital_id: "HC".into(),
        iat: now().timestamp(),
        exp: now().timestamp() + 8 * 3600,
    };
    let token = ring.sign(&doctor).unwrap();
    let alphabet = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_.";
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1_000 {
        let mut bytes = token.clone().into_bytes();
        let pos = rng.random_range(0..bytes.len());
        let c = loop {
            let c = alphabet[rng.random_range(0..alphabet.len())];
            if c != bytes[pos] {
                break c;
            }
        };
        bytes[pos] = c;
        let forged = String::from_utf8(bytes).unwrap();
        let verdict = ring.verify::<DoctorClaims>(&forged, &now());
        // the last character of a segment can carry unused base64 bits
        if let Ok(claims) = verdict {
            assert_eq!(claims, doctor);
        }
    }
}

#[test]
fn swapped_signature_from_other_hospital_rejected() {
    let ring = ring();
    let mut kw_claims = consent();
    kw_claims.hospital_id = "KW".into();
    let hc = ring.sign(&consent()).unwrap();
    let kw = ring.sign(&kw_claims).unwrap();
    let hc_parts: Vec<&str> = hc.split('.').collect();
    let kw_parts: Vec<&str> = kw.split('.').collect();
    let spliced = format!("{}.{}.{}", hc_parts[0], hc_parts[1], kw_parts[2]);
    assert_eq!(ring.verify::<ConsentClaims>(&spliced, &now()).unwrap_err(), Rejection::BadSignature);
}
