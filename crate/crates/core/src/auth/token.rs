//! Compact signed tokens: `base64url(header).base64url(claims).base64url(mac)`.
//!
//! The MAC is HMAC-SHA-256 over the first two segments exactly as sent, under
//! the issuing hospital's key (named by `kid` in the header). Every service
//! holds the federation's verification key map.

use std::collections::HashMap;
use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{KeyInit, Mac};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_bytes;
use crate::deid::HmacSha256;
use crate::model::{EhrType, PatientRef, Timestamp};

const ALG: &str = "HS256";
/// Longest lifetime a consent token may carry.
pub const CONSENT_MAX_LIFETIME_SECS: i64 = 15 * 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Doctor,
    Consent,
    Node,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Doctor,
    Admin,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    alg: String,
    kid: String,
    typ: TokenKind,
}

/// Claims common to every token kind.
pub trait Claims: Serialize + DeserializeOwned {
    const KIND: TokenKind;
    fn issuer(&self) -> &str;
    fn issued_at(&self) -> i64;
    fn expires_at(&self) -> i64;
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoctorClaims {
    pub sub: String,
    pub role: Role,
    pub hospital_id: String,
    pub iat: i64,
    pub exp: i64,
}

impl Claims for DoctorClaims {
    const KIND: TokenKind = TokenKind::Doctor;
    fn issuer(&self) -> &str {
        &self.hospital_id
    }
    fn issued_at(&self) -> i64 {
        self.iat
    }
    fn expires_at(&self) -> i64 {
        self.exp
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentClaims {
    pub patient_ref: PatientRef,
    pub granted_to: String,
    pub hospital_id: String,
    /// Inclusive bounds of record dates the consent covers (unix seconds).
    pub scope_from: i64,
    pub scope_to: i64,
    pub scope_types: Vec<EhrType>,
    pub iat: i64,
    pub exp: i64,
}

impl Claims for ConsentClaims {
    const KIND: TokenKind = TokenKind::Consent;
    fn issuer(&self) -> &str {
        &self.hospital_id
    }
    fn issued_at(&self) -> i64 {
        self.iat
    }
    fn expires_at(&self) -> i64 {
        self.exp
    }
    fn check(&self) -> Result<(), String> {
        if self.exp - self.iat > CONSENT_MAX_LIFETIME_SECS {
            return Err("consent lifetime exceeds 15 minutes".into());
        }
        if self.scope_from > self.scope_to {
            return Err("consent scope_from after scope_to".into());
        }
        Ok(())
    }
}

impl ConsentClaims {
    pub fn covers_range(&self, from: &Timestamp, to: &Timestamp) -> bool {
        self.scope_from <= from.timestamp() && to.timestamp() <= self.scope_to
    }

    pub fn covers_instant(&self, at: &Timestamp) -> bool {
        self.covers_range(at, at)
    }

    pub fn covers_type(&self, t: EhrType) -> bool {
        self.scope_types.contains(&t)
    }

    /// An empty request list means every type.
    pub fn covers_types(&self, requested: &[EhrType]) -> bool {
        if requested.is_empty() {
            EhrType::ALL.iter().all(|t| self.covers_type(*t))
        } else {
            requested.iter().all(|t| self.covers_type(*t))
        }
    }
}

/// Token presented by a hospital node to the index service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeClaims {
    pub hospital_id: String,
    pub iat: i64,
    pub exp: i64,
}

impl Claims for NodeClaims {
    const KIND: TokenKind = TokenKind::Node;
    fn issuer(&self) -> &str {
        &self.hospital_id
    }
    fn issued_at(&self) -> i64 {
        self.iat
    }
    fn expires_at(&self) -> i64 {
        self.exp
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    Malformed(String),
    BadSignature,
    WrongKind { expected: TokenKind, found: TokenKind },
    Expired,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::Malformed(why) => write!(f, "malformed token: {why}"),
            Rejection::BadSignature => f.write_str("bad signature"),
            Rejection::WrongKind { expected, found } => {
                write!(f, "wrong token kind: expected {expected:?}, found {found:?}")
            }
            Rejection::Expired => f.write_str("token expired"),
        }
    }
}

impl std::error::Error for Rejection {}

#[derive(Clone, PartialEq, Eq)]
pub struct SigningKey([u8; 32]);

impl SigningKey {
    pub fn new(bytes: [u8; 32]) -> Self {
        SigningKey(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s.trim(), &mut out)?;
        Ok(SigningKey(out))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.0).expect("hmac accepts any key length")
    }
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SigningKey(..)")
    }
}

/// Per-hospital signing keys, shared across the federation for verification.
#[derive(Debug, Clone, Default)]
pub struct KeyRing {
    keys: HashMap<String, SigningKey>,
}

impl KeyRing {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, hospital_id: &str, key: SigningKey) {
        self.keys.insert(hospital_id.to_string(), key);
    }

    pub fn contains(&self, hospital_id: &str) -> bool {
        self.keys.contains_key(hospital_id)
    }

    pub fn hospitals(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.keys.keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Signs `claims` with the issuer's key.
    pub fn sign<C: Claims>(&self, claims: &C) -> Result<String, Rejection> {
        let key = self
            .keys
            .get(claims.issuer())
            .ok_or_else(|| Rejection::Malformed(format!("no key for issuer {}", claims.issuer())))?;
        let header = Header {
            alg: ALG.into(),
            kid: claims.issuer().to_string(),
            typ: C::KIND,
        };
        let signing_input = format!("{}.{}", encode_json(&header)?, encode_json(claims)?);
        let mut mac = key.mac();
        mac.update(signing_input.as_bytes());
        let sig = URL_SAFE_NO_PAD.encode(mac.finalize().into_bytes());
        Ok(format!("{signing_input}.{sig}"))
    }

    /// Checks structure, signature, kind and expiry, in that order.
    pub fn verify<C: Claims>(&self, token: &str, now: &Timestamp) -> Result<C, Rejection> {
        let mut parts = token.split('.');
        let (Some(h), Some(c), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(Rejection::Malformed("expected three segments".into()));
        };
        let header: Header = decode_json(h)?;
        if header.alg != ALG {
            return Err(Rejection::Malformed(format!("unsupported alg {}", header.alg)));
        }
        let key = self.keys.get(&header.kid).ok_or(Rejection::BadSignature)?;
        let sig = URL_SAFE_NO_PAD
            .decode(s)
            .map_err(|e| Rejection::Malformed(e.to_string()))?;
        let mut mac = key.mac();
        mac.update(h.as_bytes());
        mac.update(b".");
        mac.update(c.as_bytes());
        mac.verify_slice(&sig).map_err(|_| Rejection::BadSignature)?;

        if header.typ != C::KIND {
            return Err(Rejection::WrongKind {
                expected: C::KIND,
                found: header.typ,
            });
        }
        let claims: C = decode_json(c)?;
        if claims.issuer() != header.kid {
            return Err(Rejection::Malformed("issuer does not match key id".into()));
        }
        if claims.expires_at() <= claims.issued_at() {
            return Err(Rejection::Malformed("expires_at not after issued_at".into()));
        }
        claims.check().map_err(Rejection::Malformed)?;
        if now.timestamp() >= claims.expires_at() {
            return Err(Rejection::Expired);
        }
        Ok(claims)
    }
}

fn decode_json<T: DeserializeOwned>(segment: &str) -> Result<T, Rejection> {
    let bytes = URL_SAFE_NO_PAD
        .decode(segment)
        .map_err(|e| Rejection::Malformed(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| Rejection::Malformed(e.to_string()))
}

fn encode_json<T: Serialize>(value: &T) -> Result<String, Rejection> {
    let bytes = to_canonical_bytes(value).map_err(|e| Rejection::Malformed(e.to_string()))?;
    Ok(URL_SAFE_NO_PAD.encode(bytes))
}
