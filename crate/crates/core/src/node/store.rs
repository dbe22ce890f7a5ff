use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use thiserror::Error;

use crate::audit::Durability;
use crate::canonical::canonical_serialize;
use crate::error::{ModelError, ServiceError};
use crate::model::UnifiedEhr;

pub const RECORDS_FILE: &str = "records.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record {ehr_id} belongs to {found}, not {expected}")]
    WrongHospital {
        ehr_id: String,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Invalid(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record log line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::WrongHospital { .. } | StoreError::Invalid(_) => ServiceError::validation(e.to_string()),
            _ => ServiceError::internal("record store failure").with_detail(e.to_string()),
        }
    }
}

/// A hospital's unified records, kept in memory and logged to
/// `records.jsonl`; the last line for an ehr id wins on reopen.
pub struct RecordStore {
    hospital_id: String,
    path: PathBuf,
    durability: Durability,
    records: RwLock<HashMap<String, UnifiedEhr>>,
    file: Mutex<File>,
}

impl std::fmt::Debug for RecordStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RecordStore")
            .field("hospital_id", &self.hospital_id)
            .field("path", &self.path)
            .finish()
    }
}

impl RecordStore {
    pub fn open(dir: &Path, hospital_id: &str, durability: Durability) -> Result<Self, StoreError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| StoreError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join(RECORDS_FILE);
        let mut records = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(io(&path))?;
            for (i, line) in text.lines().enumerate() {
                let corrupt = |reason: String| StoreError::Corrupt { line: i + 1, reason };
                let doc: serde_json::Value = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
                let rec = UnifiedEhr::from_document(&doc).map_err(|e| corrupt(e.to_string()))?;
                if rec.hospital_id != hospital_id {
                    return Err(corrupt(format!("record of {}", rec.hospital_id)));
                }
                records.insert(rec.ehr_id.clone(), rec);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        Ok(RecordStore {
            hospital_id: hospital_id.to_string(),
            path,
            durability,
            records: RwLock::new(records),
            file: Mutex::new(file),
        })
    }

    pub fn hospital_id(&self) -> &str {
        &self.hospital_id
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn put(&self, record: &UnifiedEhr) -> Result<(), StoreError> {
        self.put_many(std::slice::from_ref(record)).map(|_| ())
    }

    /// Durably writes every record that differs from the stored copy and
    /// returns how many were written.
    pub fn put_many(&self, records: &[UnifiedEhr]) -> Result<usize, StoreError> {
        let mut file = self.file.lock().expect("record log poisoned");
        let mut buf = Vec::new();
        let mut changed = Vec::new();
        {
            let current = self.records.read().expect("record map poisoned");
            for r in records {
                if r.hospital_id != self.hospital_id {
                    return Err(StoreError::WrongHospital {
                        ehr_id: r.ehr_id.clone(),
                        expected: self.hospital_id.clone(),
                        found: r.hospital_id.clone(),
                    });
                }
                let line = canonical_serialize(r)?;
                if current.get(&r.ehr_id) == Some(r) {
                    continue;
                }
                buf.extend(line);
                buf.push(b'\n');
                changed.push(r);
            }
        }
        if changed.is_empty() {
            return Ok(0);
        }
        let io = |source| StoreError::Io {
            path: self.path.clone(),
            source,
        };
        file.write_all(&buf).map_err(io)?;
        match self.durability {
            Durability::Fsync => file.sync_data(),
            Durability::Flush => file.flush(),
        }
        .map_err(io)?;
        let mut current = self.records.write().expect("record map poisoned");
        for r in &changed {
            current.insert(r.ehr_id.clone(), (*r).clone());
        }
        Ok(changed.len())
    }

    pub fn get(&self, ehr_id: &str) -> Option<UnifiedEhr> {
        self.records.read().expect("record map poisoned").get(ehr_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.records.read().expect("record map poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::hemodialysis_record;

    #[test]
    fn put_get_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let rec = hemodialysis_record();
        {
            let store = RecordStore::open(dir.path(), "HC", Durability::Flush).unwrap();
            assert!(store.get("0221").is_none());
            store.put(&rec).unwrap();
            assert_eq!(store.get("0221"), Some(rec.clone()));
            assert_eq!(store.put_many(std::slice::from_ref(&rec)).unwrap(), 0);
        }
        let store = RecordStore::open(dir.path(), "HC", Durability::Flush).unwrap();
        assert_eq!(store.get("0221"), Some(rec.clone()));

        let mut newer = rec.clone();
        newer.doctor_name = "Dr. Lei".into();
        store.put(&newer).unwrap();
        drop(store);
        let store = RecordStore::open(dir.path(), "HC", Durability::Flush).unwrap();
        assert_eq!(store.get("0221").unwrap().doctor_name, "Dr. Lei");
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn rejects_foreign_and_invalid_records() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::open(dir.path(), "KW", Durability::Flush).unwrap();
        assert!(matches!(store.put(&hemodialysis_record()), Err(StoreError::WrongHospital { .. })));
        let mut bad = hemodialysis_record();
        bad.hospital_id = "KW".into();
        bad.language = "fr".into();
        assert!(matches!(store.put(&bad), Err(StoreError::Invalid(_))));
        assert!(store.is_empty());
    }
}
