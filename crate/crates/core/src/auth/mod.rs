//! Two-way authentication: a doctor logs in at their own hospital, then the
//! patient scans their ID card to grant a short-lived, scoped consent bound
//! to that doctor. Data access needs both tokens.

mod credentials;
mod token;

use std::collections::HashMap;
use std::sync::Arc;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::audit::{AuditAction, AuditDraft, AuditLog, AuditOutcome};
use crate::deid::{hash_patient_id, FederationKey};
use crate::error::ServiceError;
use crate::model::{rfc3339, EhrType, PatientRef, Timestamp};

pub use credentials::{CredentialRecord, CredentialTable};
pub use token::{
    Claims, ConsentClaims, DoctorClaims, KeyRing, NodeClaims, Rejection, Role, SigningKey, TokenKind,
    CONSENT_MAX_LIFETIME_SECS,
};

/// Header names the tokens travel in.
pub const DOCTOR_TOKEN_HEADER: &str = "X-Doctor-Token";
pub const CONSENT_TOKEN_HEADER: &str = "X-Consent-Token";
pub const NODE_TOKEN_HEADER: &str = "X-Node-Token";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenPolicy {
    pub doctor_ttl: Duration,
    pub consent_ttl: Duration,
    pub node_ttl: Duration,
}

impl Default for TokenPolicy {
    fn default() -> Self {
        TokenPolicy {
            doctor_ttl: Duration::hours(8),
            consent_ttl: Duration::seconds(CONSENT_MAX_LIFETIME_SECS),
            node_ttl: Duration::minutes(5),
        }
    }
}

/// Record dates and types a patient consents to share.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentScope {
    #[serde(with = "rfc3339")]
    pub from: Timestamp,
    #[serde(with = "rfc3339")]
    pub to: Timestamp,
    /// Empty means every type.
    #[serde(default)]
    pub types: Vec<EhrType>,
}

/// Verifies tokens on behalf of a service.
#[derive(Debug, Clone)]
pub struct Gate {
    keyring: Arc<KeyRing>,
}

#[derive(Debug, Clone)]
pub struct Grant {
    pub doctor: DoctorClaims,
    pub consent: ConsentClaims,
}

/// Why a two-way check failed, with the doctor if one was identified.
#[derive(Debug, Clone)]
pub struct Denial {
    pub error: ServiceError,
    pub doctor: Option<DoctorClaims>,
}

impl Gate {
    pub fn new(keyring: Arc<KeyRing>) -> Self {
        Gate { keyring }
    }

    pub fn keyring(&self) -> &KeyRing {
        &self.keyring
    }

    /// Missing or invalid doctor token: 401.
    pub fn doctor(&self, token: Option<&str>, now: &Timestamp) -> Result<DoctorClaims, ServiceError> {
        let token = token.ok_or_else(|| ServiceError::unauthenticated("missing doctor token"))?;
        self.keyring
            .verify::<DoctorClaims>(token, now)
            .map_err(|r| ServiceError::unauthenticated("invalid doctor token").with_detail(r.to_string()))
    }

    /// Admin role required: 401 without a valid token, 403 for other roles.
    pub fn admin(&self, token: Option<&str>, now: &Timestamp) -> Result<DoctorClaims, ServiceError> {
        let claims = self.doctor(token, now)?;
        if claims.role != Role::Admin {
            return Err(ServiceError::forbidden("admin role required"));
        }
        Ok(claims)
    }

    pub fn node(&self, token: Option<&str>, now: &Timestamp) -> Result<NodeClaims, ServiceError> {
        let token = token.ok_or_else(|| ServiceError::unauthenticated("missing node token"))?;
        self.keyring
            .verify::<NodeClaims>(token, now)
            .map_err(|r| ServiceError::unauthenticated("invalid node token").with_detail(r.to_string()))
    }

    /// The doctor half is checked first (401); with a valid doctor-role token,
    /// every consent problem is a 403.
    pub fn two_way(&self, doctor: Option<&str>, consent: Option<&str>, now: &Timestamp) -> Result<Grant, Denial> {
        let doctor = self.doctor(doctor, now).map_err(|error| Denial { error, doctor: None })?;
        let deny = |error: ServiceError| Denial {
            error,
            doctor: Some(doctor.clone()),
        };
        if doctor.role != Role::Doctor {
            return Err(deny(ServiceError::forbidden("doctor role required")));
        }
        let consent = consent.ok_or_else(|| deny(ServiceError::forbidden("missing patient consent")))?;
        let consent = self
            .keyring
            .verify::<ConsentClaims>(consent, now)
            .map_err(|r| deny(ServiceError::forbidden("invalid patient consent").with_detail(r.to_string())))?;
        if consent.granted_to != doctor.sub || consent.hospital_id != doctor.hospital_id {
            return Err(deny(ServiceError::forbidden("consent was granted to another doctor")));
        }
        Ok(Grant { doctor, consent })
    }
}

/// Audit draft for a refused request.
pub fn denial_draft(
    now: &Timestamp,
    operation: &str,
    error: &ServiceError,
    doctor: Option<&DoctorClaims>,
) -> AuditDraft {
    let (sub, hospital) = doctor.map_or(("", ""), |d| (d.sub.as_str(), d.hospital_id.as_str()));
    AuditDraft::new(*now, AuditAction::Denied, AuditOutcome::Denied)
        .actor(sub, hospital)
        .detail(format!("{operation}: {}", error.message))
}

/// Login and consent capture at one hospital.
pub struct AuthService {
    hospital_id: String,
    keyring: Arc<KeyRing>,
    credentials: HashMap<String, CredentialRecord>,
    federation_key: FederationKey,
    audit: Arc<AuditLog>,
    policy: TokenPolicy,
}

impl std::fmt::Debug for AuthService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuthService")
            .field("hospital_id", &self.hospital_id)
            .field("doctors", &self.credentials.len())
            .finish()
    }
}

impl AuthService {
    pub fn new(
        hospital_id: &str,
        keyring: Arc<KeyRing>,
        credentials: &CredentialTable,
        federation_key: FederationKey,
        audit: Arc<AuditLog>,
    ) -> Self {
        AuthService {
            hospital_id: hospital_id.to_string(),
            keyring,
            credentials: credentials.index(),
            federation_key,
            audit,
            policy: TokenPolicy::default(),
        }
    }

    pub fn with_policy(mut self, policy: TokenPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn hospital_id(&self) -> &str {
        &self.hospital_id
    }

    pub fn gate(&self) -> Gate {
        Gate::new(Arc::clone(&self.keyring))
    }

    pub fn doctor_login(
        &self,
        doctor_id: &str,
        secret: &str,
        hospital_id: &str,
        now: &Timestamp,
    ) -> Result<String, ServiceError> {
        if !self.keyring.contains(hospital_id) {
            return Err(ServiceError::validation(format!("unknown hospital {hospital_id:?}")));
        }
        if hospital_id != self.hospital_id {
            return Err(ServiceError::validation(format!(
                "doctors of {hospital_id} log in at their own hospital, not {}",
                self.hospital_id
            )));
        }
        let record = match self.credentials.get(doctor_id) {
            Some(r) if r.matches(secret) => r,
            _ => {
                let err = ServiceError::unauthenticated("bad credentials");
                self.audit.append(
                    AuditDraft::new(*now, AuditAction::Login, AuditOutcome::Denied)
                        .actor(doctor_id, hospital_id)
                        .detail("bad credentials"),
                )?;
                return Err(err);
            }
        };
        let iat = now.timestamp();
        let claims = DoctorClaims {
            sub: record.doctor_id.clone(),
            role: record.role,
            hospital_id: self.hospital_id.clone(),
            iat,
            exp: iat + self.policy.doctor_ttl.num_seconds(),
        };
        let token = self.sign(&claims)?;
        self.audit.append(
            AuditDraft::new(*now, AuditAction::Login, AuditOutcome::Success)
                .actor(&claims.sub, &self.hospital_id)
                .detail(format!("role={:?}", claims.role).to_lowercase()),
        )?;
        Ok(token)
    }

    /// Hashes the scanned ID into a patient reference and issues a consent
    /// token bound to the requesting doctor. The scan itself is not kept.
    pub fn grant_consent(
        &self,
        scan: &str,
        doctor_token: Option<&str>,
        scope: &ConsentScope,
        now: &Timestamp,
    ) -> Result<String, ServiceError> {
        let gate = self.gate();
        let doctor = match gate.doctor(doctor_token, now) {
            Ok(d) => d,
            Err(e) => {
                self.audit.append(denial_draft(now, "consent", &e, None))?;
                return Err(e);
            }
        };
        let refuse = |e: ServiceError| -> ServiceError {
            match self.audit.append(denial_draft(now, "consent", &e, Some(&doctor))) {
                Ok(_) => e,
                Err(audit) => audit.into(),
            }
        };
        if doctor.role != Role::Doctor {
            return Err(refuse(ServiceError::forbidden("doctor role required")));
        }
        if doctor.hospital_id != self.hospital_id {
            return Err(refuse(ServiceError::forbidden("consent is captured at the doctor's hospital")));
        }
        if scope.from > scope.to {
            return Err(ServiceError::validation("consent scope: from after to"));
        }
        let patient_ref: PatientRef = hash_patient_id(scan, &self.federation_key)
            .map_err(|_| ServiceError::validation("empty ID card scan"))?;
        let mut types = if scope.types.is_empty() {
            EhrType::ALL.to_vec()
        } else {
            scope.types.clone()
        };
        types.sort();
        types.dedup();
        let iat = now.timestamp();
        let claims = ConsentClaims {
            patient_ref,
            granted_to: doctor.sub.clone(),
            hospital_id: self.hospital_id.clone(),
            scope_from: scope.from.timestamp(),
            scope_to: scope.to.timestamp(),
            scope_types: types,
            iat,
            exp: iat + self.policy.consent_ttl.num_seconds().min(CONSENT_MAX_LIFETIME_SECS),
        };
        let token = self.sign(&claims)?;
        self.audit.append(
            AuditDraft::new(*now, AuditAction::ConsentGranted, AuditOutcome::Success)
                .actor(&doctor.sub, &doctor.hospital_id)
                .patient(&claims.patient_ref),
        )?;
        Ok(token)
    }

    /// Token this hospital's sync agent presents to the index service.
    pub fn node_token(&self, now: &Timestamp) -> Result<String, ServiceError> {
        let iat = now.timestamp();
        self.sign(&NodeClaims {
            hospital_id: self.hospital_id.clone(),
            iat,
            exp: iat + self.policy.node_ttl.num_seconds(),
        })
    }

    fn sign<C: Claims>(&self, claims: &C) -> Result<String, ServiceError> {
        self.keyring
            .sign(claims)
            .map_err(|r| ServiceError::internal("cannot sign token").with_detail(r.to_string()))
    }
}


#[cfg(test)]
mod tests {
    use super::testkit::*;
    use super::*;
    use crate::model::parse_timestamp;

    fn now() -> Timestamp {
        parse_timestamp("2016-05-01T09:00:00+08:00").unwrap()
    }

    fn all_dates() -> ConsentScope {
        ConsentScope {
            from: parse_timestamp("2010-01-01T00:00:00+08:00").unwrap(),
            to: parse_timestamp("2016-12-31T23:59:59+08:00").unwrap(),
            types: vec![],
        }
    }

    #[test]
    fn login_roles() {
        let dir = tempfile::tempdir().unwrap();
        let auth = service("HC", dir.path());
        let t = auth.doctor_login("dr-chan", "pw-chan", "HC", &now()).unwrap();
        let claims = auth.gate().doctor(Some(&t), &now()).unwrap();
        assert_eq!(claims.role, Role::Doctor);
        assert_eq!(claims.exp - claims.iat, 8 * 3600);

        let admin = auth.doctor_login("admin", "pw-admin", "HC", &now()).unwrap();
        assert_eq!(auth.gate().admin(Some(&admin), &now()).unwrap().role, Role::Admin);
        assert_eq!(auth.gate().admin(Some(&t), &now()).unwrap_err().status(), 403);
    }

    #[test]
    fn login_failures() {
        let dir = tempfile::tempdir().unwrap();
        let auth = service("HC", dir.path());
        assert_eq!(auth.doctor_login("dr-chan", "nope", "HC", &now()).unwrap_err().status(), 401);
        assert_eq!(auth.doctor_login("ghost", "pw-chan", "HC", &now()).unwrap_err().status(), 401);
        assert_eq!(auth.doctor_login("dr-chan", "pw-chan", "ZZ", &now()).unwrap_err().status(), 400);
        assert_eq!(auth.doctor_login("dr-chan", "pw-chan", "KW", &now()).unwrap_err().status(), 400);
    }

    #[test]
    fn consent_hashes_scan() {
        let dir = tempfile::tempdir().unwrap();
        let auth = service("HC", dir.path());
        let doctor = auth.doctor_login("dr-chan", "pw-chan", "HC", &now()).unwrap();
        let consent = auth.grant_consent("M1234567", Some(&doctor), &all_dates(), &now()).unwrap();
        let grant = auth.gate().two_way(Some(&doctor), Some(&consent), &now()).unwrap();
        assert_eq!(
            grant.consent.patient_ref,
            hash_patient_id("M1234567", &federation_key()).unwrap()
        );
        assert_eq!(grant.consent.scope_types, EhrType::ALL.to_vec());
        let log = std::fs::read_to_string(dir.path().join("audit.log")).unwrap();
        assert!(!log.contains("M1234567"));
    }

    #[test]
    fn consent_errors() {
        let dir = tempfile::tempdir().unwrap();
        let auth = service("HC", dir.path());
        assert_eq!(auth.grant_consent("M1", None, &all_dates(), &now()).unwrap_err().status(), 401);
        assert_eq!(
            auth.grant_consent("M1", Some("garbage"), &all_dates(), &now()).unwrap_err().status(),
            401
        );
        let doctor = auth.doctor_login("dr-chan", "pw-chan", "HC", &now()).unwrap();
        assert_eq!(auth.grant_consent("  ", Some(&doctor), &all_dates(), &now()).unwrap_err().status(), 400);
        let admin = auth.doctor_login("admin", "pw-admin", "HC", &now()).unwrap();
        assert_eq!(auth.grant_consent("M1", Some(&admin), &all_dates(), &now()).unwrap_err().status(), 403);
    }

    #[test]
    fn consent_bound_to_doctor_and_expires() {
        let dir = tempfile::tempdir().unwrap();
        let auth = service("HC", dir.path());
        let chan = auth.doctor_login("dr-chan", "pw-chan", "HC", &now()).unwrap();
        let lei = auth.doctor_login("dr-lei", "pw-lei", "HC", &now()).unwrap();
        let consent = auth.grant_consent("M1234567", Some(&chan), &all_dates(), &now()).unwrap();

        let denied = auth.gate().two_way(Some(&lei), Some(&consent), &now()).unwrap_err();
        assert_eq!(denied.error.status(), 403);
        assert_eq!(denied.doctor.unwrap().sub, "dr-lei");

        let later = now() + Duration::minutes(15);
        let expired = auth.gate().two_way(Some(&chan), Some(&consent), &later).unwrap_err();
        assert_eq!(expired.error.status(), 403);
        let just_before = now() + Duration::seconds(15 * 60 - 1);
        assert!(auth.gate().two_way(Some(&chan), Some(&consent), &just_before).is_ok());
    }

    #[test]
    fn gate_ordering() {
        let dir = tempfile::tempdir().unwrap();
        let auth = service("HC", dir.path());
        let chan = auth.doctor_login("dr-chan", "pw-chan", "HC", &now()).unwrap();
        let consent = auth.grant_consent("M1234567", Some(&chan), &all_dates(), &now()).unwrap();
        let gate = auth.gate();
        assert_eq!(gate.two_way(None, None, &now()).unwrap_err().error.status(), 401);
        assert_eq!(gate.two_way(None, Some(&consent), &now()).unwrap_err().error.status(), 401);
        assert_eq!(gate.two_way(Some(&chan), None, &now()).unwrap_err().error.status(), 403);
        // consent token in the doctor slot
        assert_eq!(gate.two_way(Some(&consent), Some(&chan), &now()).unwrap_err().error.status(), 401);
        assert!(gate.two_way(Some(&chan), Some(&consent), &now()).is_ok());
    }
}
