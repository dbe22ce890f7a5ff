//! Patient de-identification.
//!
//! A national ID card number is turned into a [`PatientRef`] with
//! HMAC-SHA-256 under a federation-wide key. Every hospital normalizes the raw
//! number the same way, so the same card yields the same digest everywhere
//! while the index never sees the card number itself.

use std::fmt;

use hmac::{Hmac, KeyInit, Mac};
use sha2::Sha256;

use crate::error::ModelError;
use crate::exec::Execution;
use crate::model::PatientRef;

pub(crate) type HmacSha256 = Hmac<Sha256>;

/// 32-byte secret shared by hospital nodes (never by the index server).
#[derive(Clone, PartialEq, Eq)]
pub struct FederationKey([u8; 32]);

impl FederationKey {
    pub fn new(bytes: [u8; 32]) -> Self {
        FederationKey(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s.trim(), &mut out)?;
        Ok(FederationKey(out))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for FederationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FederationKey(..)")
    }
}

/// Trims, uppercases and removes hyphens and whitespace.
pub fn normalize_national_id(raw: &str) -> String {
    raw.chars()
        .filter(|c| *c != '-' && !c.is_whitespace())
        .flat_map(char::to_uppercase)
        .collect()
}

pub fn hash_patient_id(raw_id: &str, key: &FederationKey) -> Result<PatientRef, ModelError> {
    let normalized = normalize_national_id(raw_id);
    if normalized.is_empty() {
        return Err(ModelError::EmptyNationalId);
    }
    let mut mac = HmacSha256::new_from_slice(key.as_bytes()).expect("hmac accepts any key length");
    mac.update(normalized.as_bytes());
    Ok(PatientRef::from_digest(&mac.finalize().into_bytes()))
}

/// Hashes a batch of IDs; results keep input order.
pub fn hash_patient_ids(
    raw_ids: &[String],
    key: &FederationKey,
    exec: Execution,
) -> Vec<Result<PatientRef, ModelError>> {
    exec.map(raw_ids, |raw| hash_patient_id(raw, key))
}
