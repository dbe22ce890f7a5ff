//! Writes a federation directory: keys, mappings, credential tables, legacy
//! stores and the topology file that ties them together.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use ehrfed_core::auth::{CredentialRecord, CredentialTable, Role, SigningKey};
use ehrfed_core::canonical::to_canonical_bytes;
use ehrfed_core::deid::FederationKey;
use ehrfed_core::legacy::{fixture_mapping, FieldMapping, LegacyRow, LegacyStore, SourceRecord};

use crate::config::{DurabilityMode, HospitalSpec, IndexSpec, Topology};

pub const TOPOLOGY_FILE: &str = "topology.json";

#[derive(Debug, Clone)]
pub struct Account {
    pub id: String,
    pub role: Role,
    pub secret: String,
}

impl Account {
    pub fn new(id: &str, role: Role, secret: &str) -> Self {
        Account {
            id: id.into(),
            role,
            secret: secret.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HospitalLayout {
    pub hospital_id: String,
    pub listen: SocketAddr,
    pub signing_key: SigningKey,
    pub mapping: FieldMapping,
    pub accounts: Vec<Account>,
    pub records: Vec<SourceRecord>,
    pub sync_interval_secs: u64,
}

impl HospitalLayout {
    /// A hospital using the built-in mapping for `hospital_id`.
    pub fn fixture(hospital_id: &str, signing_key: SigningKey, accounts: Vec<Account>, records: Vec<SourceRecord>) -> Self {
        HospitalLayout {
            hospital_id: hospital_id.into(),
            listen: "127.0.0.1:0".parse().expect("literal address"),
            signing_key,
            mapping: fixture_mapping(hospital_id).unwrap_or_else(|| panic!("no fixture mapping for {hospital_id}")),
            accounts,
            records,
            sync_interval_secs: 60,
        }
    }

    pub fn rows(&self) -> Vec<LegacyRow> {
        self.records.iter().map(|r| r.to_row(&self.mapping)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FederationLayout {
    pub federation_key: FederationKey,
    pub durability: DurabilityMode,
    pub index_listen: SocketAddr,
    pub hospitals: Vec<HospitalLayout>,
}

fn write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)
}

fn json_pretty<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let canonical = to_canonical_bytes(value).expect("layout documents serialize");
    let v: serde_json::Value = serde_json::from_slice(&canonical).expect("canonical output parses");
    let mut out = serde_json::to_vec_pretty(&v).expect("value serializes");
    out.push(b'\n');
    out
}

/// Salt for a credential row. Derived, so identical layouts give identical
/// files.
fn salt(hospital: &str, account: &str) -> Vec<u8> {
    ehrfed_core::canonical::sha256_hex(format!("{hospital}/{account}").as_bytes()).as_bytes()[..16].to_vec()
}

impl FederationLayout {
    /// Writes everything under `dir` and returns the topology file path.
    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        write(&dir.join("keys/federation.key"), format!("{}\n", self.federation_key.to_hex()).as_bytes())?;
        let mut hospitals = Vec::new();
        for h in &self.hospitals {
            let id = &h.hospital_id;
            let key_path = PathBuf::from(format!("keys/{id}.key"));
            write(&dir.join(&key_path), format!("{}\n", h.signing_key.to_hex()).as_bytes())?;

            let mapping_path = PathBuf::from(format!("mappings/{id}.json"));
            write(&dir.join(&mapping_path), &json_pretty(&h.mapping))?;

            let credentials = CredentialTable {
                hospital_id: id.clone(),
                doctors: h
                    .accounts
                    .iter()
                    .map(|a| CredentialRecord::new(&a.id, a.role, &a.secret, &salt(id, &a.id)))
                    .collect(),
            };
            let cred_path = PathBuf::from(format!("credentials/{id}.json"));
            write(&dir.join(&cred_path), &json_pretty(&credentials))?;

            let legacy_path = PathBuf::from(format!("legacy/{id}.jsonl"));
            std::fs::create_dir_all(dir.join("legacy"))?;
            LegacyStore::create(id, dir.join(&legacy_path), &h.rows()).map_err(std::io::Error::other)?;

            hospitals.push(HospitalSpec {
                hospital_id: id.clone(),
                listen: h.listen,
                signing_key: key_path,
                legacy_store: legacy_path,
                mapping: mapping_path,
                credentials: cred_path,
                data_dir: PathBuf::from(format!("state/{id}")),
                sync_interval_secs: h.sync_interval_secs,
            });
        }
        let topology = Topology {
            federation_key: PathBuf::from("keys/federation.key"),
            durability: self.durability,
            index: IndexSpec {
                listen: self.index_listen,
                data_dir: PathBuf::from("state/index"),
            },
            hospitals,
        };
        let path = dir.join(TOPOLOGY_FILE);
        write(&path, &json_pretty(&topology))?;
        Ok(path)
    }
}
