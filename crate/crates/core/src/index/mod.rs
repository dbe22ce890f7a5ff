//! De-identified patient index. Each entry references one shared record by
//! its location and id and carries only the hashed patient reference, the
//! record date and the record type.
//!
//! Entries live in memory, grouped by patient reference across a fixed set
//! of shards, and every applied change is appended to `index.log`. Opening
//! the index replays that log.

mod service;

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{sha256_hex, to_canonical_bytes};
use crate::error::ServiceError;
use crate::exec::Execution;
use crate::model::{rfc3339, EhrType, PatientRef, Timestamp};

pub use service::IndexService;

pub const LOG_FILE: &str = "index.log";
/// Most rows a single locate call returns.
pub const PAGE_LIMIT: usize = 1000;
const SHARDS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub patient_ref: PatientRef,
    pub ehr_id: String,
    pub ehr_type: EhrType,
    #[serde(with = "rfc3339")]
    pub recorded_at: Timestamp,
    pub location: String,
    pub sync_version: u64,
}

impl IndexEntry {
    pub fn key(&self) -> (&str, &str) {
        (&self.location, &self.ehr_id)
    }

    pub fn row(&self) -> LocateRow {
        LocateRow {
            ehr_id: self.ehr_id.clone(),
            ehr_type: self.ehr_type,
            recorded_at: self.recorded_at,
            location: self.location.clone(),
        }
    }

    fn check(&self) -> Result<(), IndexError> {
        if self.ehr_id.trim().is_empty() || self.location.trim().is_empty() {
            return Err(IndexError::InvalidEntry(format!(
                "empty ehr_id or location in entry {:?}/{:?}",
                self.location, self.ehr_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocateQuery {
    pub patient_ref: PatientRef,
    #[serde(with = "rfc3339")]
    pub date_from: Timestamp,
    #[serde(with = "rfc3339")]
    pub date_to: Timestamp,
    #[serde(default)]
    pub ehr_types: Vec<EhrType>,
    #[serde(default)]
    pub hospitals: Vec<String>,
    /// Continuation token from a previous page.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cursor: Option<String>,
}

impl LocateQuery {
    pub fn new(patient_ref: PatientRef, date_from: Timestamp, date_to: Timestamp) -> Self {
        LocateQuery {
            patient_ref,
            date_from,
            date_to,
            ehr_types: Vec::new(),
            hospitals: Vec::new(),
            cursor: None,
        }
    }

    pub fn matches(&self, e: &IndexEntry) -> bool {
        e.patient_ref == self.patient_ref
            && e.recorded_at >= self.date_from
            && e.recorded_at <= self.date_to
            && (self.ehr_types.is_empty() || self.ehr_types.contains(&e.ehr_type))
            && (self.hospitals.is_empty() || self.hospitals.contains(&e.location))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocateRow {
    pub ehr_id: String,
    pub ehr_type: EhrType,
    #[serde(with = "rfc3339")]
    pub recorded_at: Timestamp,
    pub location: String,
}

/// Newest first; location then ehr id break ties.
pub fn row_order(a: &LocateRow, b: &LocateRow) -> Ordering {
    b.recorded_at
        .cmp(&a.recorded_at)
        .then_with(|| a.location.cmp(&b.location))
        .then_with(|| a.ehr_id.cmp(&b.ehr_id))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocateResult {
    pub rows: Vec<LocateRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_cursor: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Cursor {
    t: i64,
    l: String,
    e: String,
}

impl Cursor {
    fn after(row: &LocateRow) -> String {
        let c = Cursor {
            t: row.recorded_at.timestamp(),
            l: row.location.clone(),
            e: row.ehr_id.clone(),
        };
        URL_SAFE_NO_PAD.encode(to_canonical_bytes(&c).expect("cursor serializes"))
    }

    fn decode(s: &str) -> Result<Cursor, IndexError> {
        let bytes = URL_SAFE_NO_PAD
            .decode(s)
            .map_err(|_| IndexError::InvalidQuery("malformed cursor".into()))?;
        serde_json::from_slice(&bytes).map_err(|_| IndexError::InvalidQuery("malformed cursor".into()))
    }

    /// True when `row` sorts strictly after the cursor position.
    fn precedes(&self, row: &LocateRow) -> bool {
        let t = row.recorded_at.timestamp();
        t < self.t || (t == self.t && (row.location.as_str(), row.ehr_id.as_str()) > (self.l.as_str(), self.e.as_str()))
    }
}

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("invalid locate query: {0}")]
    InvalidQuery(String),
    #[error("invalid index entry: {0}")]
    InvalidEntry(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("index log line {line}: {source}")]
    Corrupt {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl From<IndexError> for ServiceError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::InvalidQuery(_) | IndexError::InvalidEntry(_) => ServiceError::validation(e.to_string()),
            _ => ServiceError::internal("index storage failure").with_detail(e.to_string()),
        }
    }
}

type Key = (String, String);
type PatientEntries = BTreeMap<Key, IndexEntry>;

struct Writer {
    log: Option<(PathBuf, File)>,
    versions: HashMap<Key, (PatientRef, u64)>,
}

/// Sharded in-memory index with an append-only change log.
pub struct PatientIndex {
    shards: Vec<RwLock<HashMap<PatientRef, PatientEntries>>>,
    writer: Mutex<Writer>,
    dir: Option<PathBuf>,
}

impl std::fmt::Debug for PatientIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PatientIndex")
            .field("dir", &self.dir)
            .field("entries", &self.len())
            .finish()
    }
}

fn shard_of(p: &PatientRef) -> usize {
    usize::from_str_radix(&p.as_str()[..2], 16).unwrap_or(0) % SHARDS
}

impl PatientIndex {
    pub fn in_memory() -> Self {
        PatientIndex {
            shards: (0..SHARDS).map(|_| RwLock::new(HashMap::new())).collect(),
            writer: Mutex::new(Writer {
                log: None,
                versions: HashMap::new(),
            }),
            dir: None,
        }
    }

    /// Opens the index persisted under `dir`, replaying its change log.
    pub fn open(dir: &Path) -> Result<Self, IndexError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| IndexError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join(LOG_FILE);
        let mut index = PatientIndex::in_memory();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(io(&path))?;
            let mut entries = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let entry: IndexEntry =
                    serde_json::from_str(line).map_err(|source| IndexError::Corrupt { line: i + 1, source })?;
                entries.push(entry);
            }
            index.apply(&entries)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        index.writer.get_mut().expect("index writer poisoned").log = Some((path, file));
        index.dir = Some(dir.to_path_buf());
        Ok(index)
    }

    /// Directory holding the persisted state, if any.
    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Applies each entry that is new or carries a higher sync version than
    /// the stored one; returns how many were applied.
    pub fn upsert_entries(&self, entries: &[IndexEntry]) -> Result<usize, IndexError> {
        self.apply(entries)
    }

    fn apply(&self, entries: &[IndexEntry]) -> Result<usize, IndexError> {
        for e in entries {
            e.check()?;
        }
        let mut w = self.writer.lock().expect("index writer poisoned");
        let mut pending: HashMap<Key, (PatientRef, u64)> = HashMap::new();
        let mut applied: Vec<(&IndexEntry, Option<PatientRef>)> = Vec::new();
        for e in entries {
            let key = (e.location.clone(), e.ehr_id.clone());
            let current = pending.get(&key).or_else(|| w.versions.get(&key));
            if current.is_some_and(|(_, v)| *v >= e.sync_version) {
                continue;
            }
            let previous = current.map(|(p, _)| p.clone());
            pending.insert(key, (e.patient_ref.clone(), e.sync_version));
            applied.push((e, previous));
        }
        if applied.is_empty() {
            return Ok(0);
        }

        if let Some((path, file)) = w.log.as_mut() {
            let mut buf = Vec::new();
            for (e, _) in &applied {
                buf.extend(to_canonical_bytes(e).expect("index entry serializes"));
                buf.push(b'\n');
            }
            let io = |source| IndexError::Io {
                path: path.clone(),
                source,
            };
            file.write_all(&buf).map_err(io)?;
            file.sync_data().map_err(io)?;
        }

        for (e, previous) in &applied {
            let key = (e.location.clone(), e.ehr_id.clone());
            if let Some(old) = previous.as_ref().filter(|p| **p != e.patient_ref) {
                let mut shard = self.shards[shard_of(old)].write().expect("index shard poisoned");
                if let Some(m) = shard.get_mut(old) {
                    m.remove(&key);
                    if m.is_empty() {
                        shard.remove(old);
                    }
                }
            }
            self.shards[shard_of(&e.patient_ref)]
                .write()
                .expect("index shard poisoned")
                .entry(e.patient_ref.clone())
                .or_default()
                .insert(key, (*e).clone());
        }
        w.versions.extend(pending);
        Ok(applied.len())
    }

    pub fn len(&self) -> usize {
        self.writer.lock().expect("index writer poisoned").versions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every entry, ordered by (location, ehr_id).
    pub fn entries(&self) -> Vec<IndexEntry> {
        let mut all: Vec<IndexEntry> = self
            .shards
            .iter()
            .flat_map(|s| {
                let s = s.read().expect("index shard poisoned");
                s.values().flat_map(|m| m.values().cloned()).collect::<Vec<_>>()
            })
            .collect();
        all.sort_by(|a, b| a.key().cmp(&b.key()));
        all
    }

    /// SHA-256 over the canonical encoding of [`entries`](Self::entries).
    pub fn fingerprint(&self) -> String {
        sha256_hex(&to_canonical_bytes(&self.entries()).expect("index entries serialize"))
    }

    /// Locate without token checks.
    pub fn locate_unchecked(&self, query: &LocateQuery) -> Result<LocateResult, IndexError> {
        if query.date_from > query.date_to {
            return Err(IndexError::InvalidQuery("date_from is after date_to".into()));
        }
        let cursor = query.cursor.as_deref().map(Cursor::decode).transpose()?;
        let mut rows: Vec<LocateRow> = {
            let shard = self.shards[shard_of(&query.patient_ref)]
                .read()
                .expect("index shard poisoned");
            shard
                .get(&query.patient_ref)
                .map(|m| m.values().filter(|e| query.matches(e)).map(IndexEntry::row).collect())
                .unwrap_or_default()
        };
        rows.sort_by(row_order);
        if let Some(c) = &cursor {
            rows.retain(|r| c.precedes(r));
        }
        let next_cursor = if rows.len() > PAGE_LIMIT {
            rows.truncate(PAGE_LIMIT);
            rows.last().map(Cursor::after)
        } else {
            None
        };
        Ok(LocateResult { rows, next_cursor })
    }

    /// Answers many queries, each followed to its last page.
    pub fn locate_many(&self, queries: &[LocateQuery], exec: Execution) -> Vec<Result<Vec<LocateRow>, IndexError>> {
        exec.map(queries, |q| self.locate_all_unchecked(q))
    }

    /// Follows cursors until the result is exhausted.
    pub fn locate_all_unchecked(&self, query: &LocateQuery) -> Result<Vec<LocateRow>, IndexError> {
        let mut q = query.clone();
        let mut rows = Vec::new();
        loop {
            let page = self.locate_unchecked(&q)?;
            rows.extend(page.rows);
            match page.next_cursor {
                Some(c) => q.cursor = Some(c),
                None => return Ok(rows),
            }
        }
    }
}


#[cfg(test)]
mod tests {
    use super::testkit::*;
    use super::*;
    use crate::model::parse_timestamp;

    #[test]
    fn upsert_is_versioned_and_idempotent() {
        let idx = PatientIndex::in_memory();
        let batch = vec![entry(1, "HC", "0221", 30, 1), entry(1, "KW", "1043", 2, 1)];
        assert_eq!(idx.upsert_entries(&batch).unwrap(), 2);
        assert_eq!(idx.upsert_entries(&batch).unwrap(), 0);

        let mut newer = entry(1, "HC", "0221", 29, 2);
        newer.ehr_type = EhrType::RadiologyImage;
        assert_eq!(idx.upsert_entries(&[newer.clone(), entry(1, "HC", "0221", 1, 2)]).unwrap(), 1);
        assert_eq!(idx.upsert_entries(&[entry(1, "HC", "0221", 1, 1)]).unwrap(), 0);
        assert_eq!(idx.len(), 2);
        assert!(idx.entries().contains(&newer));
    }

    #[test]
    fn same_key_in_one_batch_keeps_highest() {
        let idx = PatientIndex::in_memory();
        let applied = idx
            .upsert_entries(&[entry(1, "HC", "7", 1, 1), entry(1, "HC", "7", 2, 2)])
            .unwrap();
        assert_eq!(applied, 2);
        assert_eq!(idx.entries(), vec![entry(1, "HC", "7", 2, 2)]);
    }

    #[test]
    fn reassigned_patient_moves_entry() {
        let idx = PatientIndex::in_memory();
        idx.upsert_entries(&[entry(1, "HC", "7", 1, 1)]).unwrap();
        idx.upsert_entries(&[entry(2, "HC", "7", 1, 2)]).unwrap();
        assert!(idx.locate_unchecked(&all_dates(1)).unwrap().rows.is_empty());
        assert_eq!(idx.locate_unchecked(&all_dates(2)).unwrap().rows.len(), 1);
    }

    #[test]
    fn locate_filters_and_orders() {
        let idx = PatientIndex::in_memory();
        idx.upsert_entries(&[
            entry(1, "UH", "b", 5, 1),
            entry(1, "KW", "z", 5, 1),
            entry(1, "KW", "a", 5, 1),
            entry(1, "HC", "0221", 30, 1),
            entry(2, "HC", "x", 30, 1),
        ])
        .unwrap();
        let ids: Vec<String> = idx
            .locate_unchecked(&all_dates(1))
            .unwrap()
            .rows
            .into_iter()
            .map(|r| format!("{}/{}", r.location, r.ehr_id))
            .collect();
        assert_eq!(ids, ["HC/0221", "KW/a", "KW/z", "UH/b"]);

        let mut q = all_dates(1);
        q.hospitals = vec!["KW".into()];
        assert_eq!(idx.locate_unchecked(&q).unwrap().rows.len(), 2);

        let day = parse_timestamp("2015-09-10T00:00:00+08:00").unwrap();
        let mut q = all_dates(1);
        q.date_from = day;
        q.date_to = day;
        assert!(idx.locate_unchecked(&q).unwrap().rows.is_empty());

        let mut q = all_dates(1);
        q.ehr_types = vec![EhrType::RadiologyImage];
        assert!(idx.locate_unchecked(&q).unwrap().rows.is_empty());

        let mut q = all_dates(1);
        std::mem::swap(&mut q.date_from, &mut q.date_to);
        assert!(matches!(idx.locate_unchecked(&q), Err(IndexError::InvalidQuery(_))));
    }

    #[test]
    fn bounds_are_inclusive() {
        let idx = PatientIndex::in_memory();
        let e = entry(1, "HC", "0221", 30, 1);
        idx.upsert_entries(std::slice::from_ref(&e)).unwrap();
        let mut q = all_dates(1);
        q.date_from = e.recorded_at;
        q.date_to = e.recorded_at;
        assert_eq!(idx.locate_unchecked(&q).unwrap().rows, vec![e.row()]);
    }

    #[test]
    fn pages_follow_cursor() {
        let idx = PatientIndex::in_memory();
        let entries: Vec<IndexEntry> = (0..2500)
            .map(|i| entry(3, ["HC", "KW", "UH"][i % 3], &format!("{i:05}"), 1 + (i % 28) as u32, 1))
            .collect();
        idx.upsert_entries(&entries).unwrap();
        let first = idx.locate_unchecked(&all_dates(3)).unwrap();
        assert_eq!(first.rows.len(), PAGE_LIMIT);
        assert!(first.next_cursor.is_some());
        let all = idx.locate_all_unchecked(&all_dates(3)).unwrap();
        assert_eq!(all.len(), 2500);
        assert!(all.windows(2).all(|w| row_order(&w[0], &w[1]) == Ordering::Less));

        let mut bad = all_dates(3);
        bad.cursor = Some("@@".into());
        assert!(matches!(idx.locate_unchecked(&bad), Err(IndexError::InvalidQuery(_))));
    }

    #[test]
    fn empty_ids_rejected() {
        let idx = PatientIndex::in_memory();
        assert!(idx.upsert_entries(&[entry(1, "HC", " ", 1, 1)]).is_err());
        assert!(idx.upsert_entries(&[entry(1, "", "x", 1, 1)]).is_err());
        assert!(idx.is_empty());
    }

    #[test]
    fn persists_and_rebuilds() {
        let dir = tempfile::tempdir().unwrap();
        let batch = vec![entry(1, "HC", "0221", 30, 1), entry(2, "KW", "1043", 2, 4)];
        let fp = {
            let idx = PatientIndex::open(dir.path()).unwrap();
            idx.upsert_entries(&batch).unwrap();
            idx.upsert_entries(&[entry(1, "HC", "0221", 30, 2)]).unwrap();
            idx.fingerprint()
        };
        let bytes = fs::read(dir.path().join(LOG_FILE)).unwrap();
        let idx = PatientIndex::open(dir.path()).unwrap();
        assert_eq!(idx.fingerprint(), fp);
        assert_eq!(idx.upsert_entries(&batch).unwrap(), 0);
        assert_eq!(fs::read(dir.path().join(LOG_FILE)).unwrap(), bytes);
    }

    #[test]
    fn unknown_fields_in_entry_rejected() {
        let mut doc = serde_json::to_value(entry(1, "HC", "0221", 30, 1)).unwrap();
        doc["patient_name"] = "Yang Yingying".into();
        assert!(serde_json::from_value::<IndexEntry>(doc).is_err());
    }
}
