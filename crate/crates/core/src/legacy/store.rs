use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_bytes;
use crate::model::{rfc3339, Timestamp};

use super::LegacyError;

/// One row of a simulated legacy store: the native document plus the
/// bookkeeping the legacy system keeps about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegacyRow {
    #[serde(with = "rfc3339")]
    pub mtime: Timestamp,
    /// Modification counter, bumped on every change to the row.
    pub version: u64,
    pub shared: bool,
    pub fields: BTreeMap<String, String>,
}

/// A shared row as handed to the converter.
#[derive(Debug, Clone, PartialEq)]
pub struct LegacyRecord {
    pub hospital_id: String,
    pub document: BTreeMap<String, String>,
    pub modified_at: Timestamp,
    pub version: u64,
}

/// Line-delimited JSON file standing in for a hospital's legacy database.
#[derive(Debug, Clone)]
pub struct LegacyStore {
    hospital_id: String,
    path: PathBuf,
}

impl LegacyStore {
    pub fn open(hospital_id: &str, path: impl Into<PathBuf>) -> Result<Self, LegacyError> {
        let path = path.into();
        fs::metadata(&path).map_err(|e| LegacyError::io(&path, e))?;
        Ok(LegacyStore {
            hospital_id: hospital_id.to_string(),
            path,
        })
    }

    /// Creates (or truncates) a store holding `rows`.
    pub fn create(hospital_id: &str, path: impl Into<PathBuf>, rows: &[LegacyRow]) -> Result<Self, LegacyError> {
        let store = LegacyStore {
            hospital_id: hospital_id.to_string(),
            path: path.into(),
        };
        store.write_rows(rows)?;
        Ok(store)
    }

    pub fn hospital_id(&self) -> &str {
        &self.hospital_id
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read_rows(&self) -> Result<Vec<LegacyRow>, LegacyError> {
        let text = fs::read_to_string(&self.path).map_err(|e| LegacyError::io(&self.path, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                serde_json::from_str(line).map_err(|source| LegacyError::Corrupt { line: i + 1, source })
            })
            .collect()
    }

    pub fn write_rows(&self, rows: &[LegacyRow]) -> Result<(), LegacyError> {
        let mut buf = Vec::new();
        for row in rows {
            buf.extend(to_canonical_bytes(row)?);
            buf.push(b'\n');
        }
        let tmp = self.path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| LegacyError::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| LegacyError::io(&tmp, e))?;
        f.sync_all().map_err(|e| LegacyError::io(&tmp, e))?;
        fs::rename(&tmp, &self.path).map_err(|e| LegacyError::io(&self.path, e))
    }
}

/// Shared rows modified strictly after `since`, oldest first.
pub fn extract(store: &LegacyStore, since: &Timestamp) -> Result<Vec<LegacyRecord>, LegacyError> {
    let mut records: Vec<LegacyRecord> = store
        .read_rows()?
        .into_iter()
        .filter(|row| row.shared && row.mtime > *since)
        .map(|row| LegacyRecord {
            hospital_id: store.hospital_id.clone(),
            document: row.fields,
            modified_at: row.mtime,
            version: row.version,
        })
        .collect();
    records.sort_by_key(|r| r.modified_at);
    Ok(records)
}
