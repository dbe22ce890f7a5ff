use std::collections::HashMap;
use std::path::Path;

use hmac::{KeyInit, Mac};
use serde::{Deserialize, Serialize};

use crate::deid::HmacSha256;

use super::token::Role;

/// Stored login record: the secret is kept only as HMAC(salt, secret).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialRecord {
    pub doctor_id: String,
    pub role: Role,
    pub salt: String,
    pub secret_digest: String,
}

impl CredentialRecord {
    pub fn new(doctor_id: &str, role: Role, secret: &str, salt: &[u8]) -> Self {
        CredentialRecord {
            doctor_id: doctor_id.to_string(),
            role,
            salt: hex::encode(salt),
            secret_digest: hex::encode(secret_mac(salt, secret).finalize().into_bytes()),
        }
    }

    pub fn matches(&self, secret: &str) -> bool {
        let (Ok(salt), Ok(expected)) = (hex::decode(&self.salt), hex::decode(&self.secret_digest)) else {
            return false;
        };
        secret_mac(&salt, secret).verify_slice(&expected).is_ok()
    }
}

fn secret_mac(salt: &[u8], secret: &str) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(salt).expect("hmac accepts any key length");
    mac.update(secret.as_bytes());
    mac
}

/// A hospital's credential table as stored on disk.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialTable {
    pub hospital_id: String,
    pub doctors: Vec<CredentialRecord>,
}

impl CredentialTable {
    pub fn load(path: &Path) -> std::io::Result<CredentialTable> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    pub fn index(&self) -> HashMap<String, CredentialRecord> {
        self.doctors
            .iter()
            .map(|r| (r.doctor_id.clone(), r.clone()))
            .collect()
    }
}
