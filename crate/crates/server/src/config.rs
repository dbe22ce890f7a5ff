//! Topology file: one index server and a set of hospital nodes, with the key
//! material and data locations each of them needs. Relative paths resolve
//! against the directory holding the topology file.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use ehrfed_core::audit::Durability;
use ehrfed_core::auth::{KeyRing, SigningKey};
use ehrfed_core::deid::FederationKey;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ConfigError + '_ {
    move |source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid(path: &Path, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurabilityMode {
    #[default]
    Fsync,
    Flush,
}

impl From<DurabilityMode> for Durability {
    fn from(m: DurabilityMode) -> Self {
        match m {
            DurabilityMode::Fsync => Durability::Fsync,
            DurabilityMode::Flush => Durability::Flush,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSpec {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HospitalSpec {
    pub hospital_id: String,
    pub listen: SocketAddr,
    pub signing_key: PathBuf,
    pub legacy_store: PathBuf,
    pub mapping: PathBuf,
    pub credentials: PathBuf,
    pub data_dir: PathBuf,
    #[serde(default = "default_sync_interval")]
    pub sync_interval_secs: u64,
}

fn default_sync_interval() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub federation_key: PathBuf,
    #[serde(default)]
    pub durability: DurabilityMode,
    pub index: IndexSpec,
    pub hospitals: Vec<HospitalSpec>,
}

impl Topology {
    pub fn load(path: &Path) -> Result<Topology, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        let mut t: Topology = serde_json::from_str(&text).map_err(|e| invalid(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        t.resolve(base);
        t.check().map_err(|reason| invalid(path, reason))?;
        Ok(t)
    }

    /// Makes every relative path absolute under `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.federation_key);
        fix(&mut self.index.data_dir);
        for h in &mut self.hospitals {
            fix(&mut h.signing_key);
            fix(&mut h.legacy_store);
            fix(&mut h.mapping);
            fix(&mut h.credentials);
            fix(&mut h.data_dir);
        }
    }

    fn check(&self) -> Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        for h in &self.hospitals {
            if h.hospital_id.trim().is_empty() {
                return Err("hospital with empty id".into());
            }
            if !seen.insert(&h.hospital_id) {
                return Err(format!("hospital {} listed twice", h.hospital_id));
            }
            if h.sync_interval_secs == 0 {
                return Err(format!("{}: sync_interval_secs must be positive", h.hospital_id));
            }
        }
        Ok(())
    }

    pub fn hospital(&self, id: &str) -> Option<&HospitalSpec> {
        self.hospitals.iter().find(|h| h.hospital_id == id)
    }

    pub fn hospital_ids(&self) -> Vec<String> {
        self.hospitals.iter().map(|h| h.hospital_id.clone()).collect()
    }

    pub fn index_url(&self) -> String {
        url_of(self.index.listen)
    }

    pub fn hospital_urls(&self) -> BTreeMap<String, String> {
        self.hospitals
            .iter()
            .map(|h| (h.hospital_id.clone(), url_of(h.listen)))
            .collect()
    }

    pub fn federation_key(&self) -> Result<FederationKey, ConfigError> {
        let text = std::fs::read_to_string(&self.federation_key).map_err(io(&self.federation_key))?;
        FederationKey::from_hex(text.trim()).map_err(|e| invalid(&self.federation_key, e.to_string()))
    }

    /// Token verification keys of every hospital.
    pub fn keyring(&self) -> Result<KeyRing, ConfigError> {
        let mut ring = KeyRing::new();
        for h in &self.hospitals {
            let text = std::fs::read_to_string(&h.signing_key).map_err(io(&h.signing_key))?;
            let key = SigningKey::from_hex(text.trim()).map_err(|e| invalid(&h.signing_key, e.to_string()))?;
            ring.insert(&h.hospital_id, key);
        }
        Ok(ring)
    }

    /// The per-node view of this topology.
    pub fn node_config(&self, hospital_id: &str) -> Option<NodeConfig> {
        let h = self.hospital(hospital_id)?;
        Some(NodeConfig {
            hospital_id: h.hospital_id.clone(),
            listen: h.listen,
            index_url: self.index_url(),
            peers: self
                .hospital_urls()
                .into_iter()
                .filter(|(id, _)| *id != h.hospital_id)
                .collect(),
            federation_key: self.federation_key.clone(),
            sync_interval_secs: h.sync_interval_secs,
            legacy_store: h.legacy_store.clone(),
            mapping: h.mapping.clone(),
            credentials: h.credentials.clone(),
            data_dir: h.data_dir.clone(),
            durability: self.durability,
        })
    }
}

pub fn url_of(addr: SocketAddr) -> String {
    format!("http://{addr}")
}

/// Everything one hospital node needs to run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub hospital_id: String,
    pub listen: SocketAddr,
    pub index_url: String,
    pub peers: BTreeMap<String, String>,
    pub federation_key: PathBuf,
    pub sync_interval_secs: u64,
    pub legacy_store: PathBuf,
    pub mapping: PathBuf,
    pub credentials: PathBuf,
    pub data_dir: PathBuf,
    pub durability: DurabilityMode,
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "federation_key": "keys/federation.key",
        "index": {"listen": "127.0.0.1:7400", "data_dir": "state/index"},
        "hospitals": [
            {"hospital_id": "HC", "listen": "127.0.0.1:7401", "signing_key": "keys/HC.key",
             "legacy_store": "legacy/HC.jsonl", "mapping": "mappings/HC.json",
             "credentials": "credentials/HC.json", "data_dir": "state/HC"},
            {"hospital_id": "KW", "listen": "127.0.0.1:7402", "signing_key": "/abs/KW.key",
             "legacy_store": "legacy/KW.jsonl", "mapping": "mappings/KW.json",
             "credentials": "credentials/KW.json", "data_dir": "state/KW", "sync_interval_secs": 5}
        ]
    }"#;

    #[test]
    fn loads_and_resolves() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("topology.json");
        std::fs::write(&path, SAMPLE).unwrap();
        let t = Topology::load(&path).unwrap();
        assert_eq!(t.durability, DurabilityMode::Fsync);
        assert_eq!(t.federation_key, dir.path().join("keys/federation.key"));
        assert_eq!(t.hospitals[1].signing_key, PathBuf::from("/abs/KW.key"));
        assert_eq!(t.hospitals[0].sync_interval_secs, 60);

        let hc = t.node_config("HC").unwrap();
        assert_eq!(hc.index_url, "http://127.0.0.1:7400");
        assert_eq!(hc.peers.keys().collect::<Vec<_>>(), ["KW"]);
        assert!(t.node_config("UH").is_none());
    }

    #[test]
    fn duplicate_hospital_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("topology.json");
        std::fs::write(&path, SAMPLE.replace("\"KW\"", "\"HC\"")).unwrap();
        assert!(matches!(Topology::load(&path), Err(ConfigError::Invalid { .. })));
    }
}
