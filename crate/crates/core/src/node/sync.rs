use std::fs;
use std::future::Future;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::DateTime;
use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_bytes;
use crate::deid::FederationKey;
use crate::error::{ErrorClass, ServiceError};
use crate::exec::Execution;
use crate::index::{IndexEntry, PatientIndex};
use crate::legacy::{convert_batch, extract, LegacyRecord, LegacyStore, MappingRegistry};
use crate::model::{rfc3339, Timestamp};

use super::RecordStore;

pub const SYNC_STATE_FILE: &str = "sync_state.json";

/// Where the index entries go: the index service over HTTP, or an
/// in-process index in tests.
pub trait IndexSink: Sync {
    /// Returns how many entries the sink accepted.
    fn upsert(&self, entries: &[IndexEntry]) -> impl Future<Output = Result<usize, ServiceError>> + Send;
}

impl IndexSink for PatientIndex {
    fn upsert(&self, entries: &[IndexEntry]) -> impl Future<Output = Result<usize, ServiceError>> + Send {
        let r = self.upsert_entries(entries).map(|_| entries.len()).map_err(Into::into);
        std::future::ready(r)
    }
}

/// Simulated process death at a point between extract and persisting the
/// high-water mark. Fires once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashPoint {
    AfterExtract,
    AfterStore,
    AfterPush,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncIssue {
    pub key: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    #[serde(with = "rfc3339")]
    pub started_at: Timestamp,
    #[serde(with = "rfc3339")]
    pub finished_at: Timestamp,
    pub extracted: usize,
    pub converted: usize,
    pub pushed: usize,
    pub errors: Vec<SyncIssue>,
    /// Legacy modification time everything up to which has been published.
    #[serde(with = "rfc3339")]
    pub high_water_mark: Timestamp,
}

#[derive(Debug, Serialize, Deserialize)]
struct SyncState {
    #[serde(with = "rfc3339")]
    high_water_mark: Timestamp,
}

/// Publishes a hospital's shared legacy rows: extract what changed since the
/// high-water mark, convert, store locally, push index entries, and only
/// then advance the mark.
pub struct SyncAgent {
    hospital_id: String,
    legacy: LegacyStore,
    registry: Arc<MappingRegistry>,
    key: FederationKey,
    store: Arc<RecordStore>,
    state_path: PathBuf,
    exec: Execution,
    running: tokio::sync::Mutex<()>,
    crash: Mutex<Option<CrashPoint>>,
}

impl std::fmt::Debug for SyncAgent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SyncAgent")
            .field("hospital_id", &self.hospital_id)
            .field("state_path", &self.state_path)
            .finish()
    }
}

fn epoch() -> Timestamp {
    DateTime::UNIX_EPOCH.fixed_offset()
}

impl SyncAgent {
    pub fn new(
        legacy: LegacyStore,
        registry: Arc<MappingRegistry>,
        key: FederationKey,
        store: Arc<RecordStore>,
        state_dir: &Path,
    ) -> Self {
        SyncAgent {
            hospital_id: legacy.hospital_id().to_string(),
            legacy,
            registry,
            key,
            store,
            state_path: state_dir.join(SYNC_STATE_FILE),
            exec: Execution::default(),
            running: tokio::sync::Mutex::new(()),
            crash: Mutex::new(None),
        }
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn hospital_id(&self) -> &str {
        &self.hospital_id
    }

    pub fn inject_crash(&self, point: CrashPoint) {
        *self.crash.lock().expect("crash point poisoned") = Some(point);
    }

    pub fn high_water_mark(&self) -> Result<Timestamp, ServiceError> {
        match fs::read(&self.state_path) {
            Ok(bytes) => serde_json::from_slice::<SyncState>(&bytes)
                .map(|s| s.high_water_mark)
                .map_err(|e| state_error(&self.state_path, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(epoch()),
            Err(e) => Err(state_error(&self.state_path, e)),
        }
    }

    fn persist_high_water_mark(&self, hwm: &Timestamp) -> Result<(), ServiceError> {
        let bytes = to_canonical_bytes(&SyncState { high_water_mark: *hwm }).expect("sync state serializes");
        let tmp = self.state_path.with_extension("json.tmp");
        let write = || -> std::io::Result<()> {
            if let Some(dir) = self.state_path.parent() {
                fs::create_dir_all(dir)?;
            }
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &self.state_path)
        };
        write().map_err(|e| state_error(&self.state_path, e))
    }

    fn crash_at(&self, point: CrashPoint) -> Result<(), ServiceError> {
        let mut armed = self.crash.lock().expect("crash point poisoned");
        if *armed == Some(point) {
            *armed = None;
            return Err(ServiceError::internal("sync interrupted").with_detail(format!("injected crash {point:?}")));
        }
        Ok(())
    }

    /// One sync pass. Fails with a conflict if another pass is running.
    /// Index or extraction failures are reported, not raised, and leave the
    /// high-water mark where it was.
    pub async fn sync_run<S: IndexSink>(&self, sink: &S, now: &Timestamp) -> Result<SyncReport, ServiceError> {
        let _running = self
            .running
            .try_lock()
            .map_err(|_| ServiceError::new(ErrorClass::Conflict, "sync already running"))?;
        let since = self.high_water_mark()?;
        let mut report = SyncReport {
            started_at: *now,
            finished_at: *now,
            extracted: 0,
            converted: 0,
            pushed: 0,
            errors: Vec::new(),
            high_water_mark: since,
        };
        let clock = std::time::Instant::now();
        let finish = |mut report: SyncReport| {
            report.finished_at = *now + chrono::Duration::from_std(clock.elapsed()).unwrap_or_default();
            report
        };

        let rows = match extract(&self.legacy, &since) {
            Ok(rows) => rows,
            Err(e) => {
                report.errors.push(issue("legacy", e));
                return Ok(finish(report));
            }
        };
        report.extracted = rows.len();
        if rows.is_empty() {
            return Ok(finish(report));
        }
        self.crash_at(CrashPoint::AfterExtract)?;

        let mut records = Vec::with_capacity(rows.len());
        let mut entries = Vec::with_capacity(rows.len());
        for (row, result) in rows.iter().zip(convert_batch(&self.registry, &rows, &self.key, self.exec)) {
            match result {
                Ok(rec) => {
                    entries.push(IndexEntry {
                        patient_ref: rec.patient_ref.clone(),
                        ehr_id: rec.ehr_id.clone(),
                        ehr_type: rec.ehr_type,
                        recorded_at: rec.recorded_at,
                        location: rec.hospital_id.clone(),
                        sync_version: row.version,
                    });
                    records.push(rec);
                }
                Err(e) => report.errors.push(issue(&self.row_key(row), e)),
            }
        }
        report.converted = records.len();

        if let Err(e) = self.store.put_many(&records) {
            report.errors.push(issue("store", e));
            return Ok(finish(report));
        }
        self.crash_at(CrashPoint::AfterStore)?;

        if !entries.is_empty() {
            match sink.upsert(&entries).await {
                Ok(n) => report.pushed = n.min(entries.len()),
                Err(e) => {
                    report.errors.push(issue("index", e));
                    return Ok(finish(report));
                }
            }
        }
        self.crash_at(CrashPoint::AfterPush)?;

        let hwm = rows.iter().map(|r| r.modified_at).max().unwrap_or(since);
        self.persist_high_water_mark(&hwm)?;
        report.high_water_mark = hwm;
        let report = finish(report);
        tracing::info!(
            hospital = %self.hospital_id,
            extracted = report.extracted,
            converted = report.converted,
            pushed = report.pushed,
            errors = report.errors.len(),
            "sync pass"
        );
        Ok(report)
    }

    fn row_key(&self, row: &LegacyRecord) -> String {
        let id = self
            .registry
            .get(&self.hospital_id)
            .and_then(|m| m.legacy_for("ehr_id").and_then(|f| row.document.get(f).cloned()))
            .unwrap_or_else(|| "?".into());
        format!("{}/{}", self.hospital_id, id)
    }
}

fn issue(key: &str, e: impl std::fmt::Display) -> SyncIssue {
    SyncIssue {
        key: key.to_string(),
        reason: e.to_string(),
    }
}

fn state_error(path: &Path, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::internal("sync state unavailable").with_detail(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::sync::atomic::{AtomicBool, Ordering};

    use super::*;
    use crate::audit::Durability;
    use crate::auth::testkit::federation_key;
    use crate::legacy::{fixture_mapping, LegacyRow};
    use crate::model::parse_timestamp;

    struct Flaky {
        index: PatientIndex,
        down: AtomicBool,
    }

    impl IndexSink for Flaky {
        async fn upsert(&self, entries: &[IndexEntry]) -> Result<usize, ServiceError> {
            if self.down.load(Ordering::SeqCst) {
                return Err(ServiceError::new(ErrorClass::Unavailable, "index unreachable"));
            }
            self.index.upsert(entries).await
        }
    }

    fn row(i: u32, version: u64) -> LegacyRow {
        let fields: BTreeMap<String, String> = [
            ("card_id", format!("M{:07}", i % 7)),
            ("record_id", format!("{i:04}")),
            ("p_name", "陳大文".to_string()),
            ("d_name", "Dr. Chan".to_string()),
            ("visit_time", format!("2014-03-{:02} 09:30", 1 + i % 28)),
            ("rec_type", "hemodialysis".to_string()),
            ("pre_wt", "61.5".to_string()),
            ("post_wt", "59.0".to_string()),
            ("bp_sys", "140".to_string()),
            ("bp_dia", "85".to_string()),
            ("dur_min", "240".to_string()),
            ("dialyzer", "FX80".to_string()),
            ("memo", "stable".to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        LegacyRow {
            mtime: parse_timestamp(&format!("2016-01-01T00:{:02}:{:02}+08:00", i / 60, i % 60)).unwrap(),
            version,
            shared: true,
            fields,
        }
    }

    struct Rig {
        dir: tempfile::TempDir,
        legacy: LegacyStore,
    }

    impl Rig {
        fn new(rows: &[LegacyRow]) -> Rig {
            let dir = tempfile::tempdir().unwrap();
            let legacy = LegacyStore::create("HC", dir.path().join("legacy.jsonl"), rows).unwrap();
            Rig { dir, legacy }
        }

        fn agent(&self, state: &str) -> SyncAgent {
            let registry = Arc::new(MappingRegistry::new());
            registry.register(fixture_mapping("HC").unwrap()).unwrap();
            let state = self.dir.path().join(state);
            let store = Arc::new(RecordStore::open(&state, "HC", Durability::Flush).unwrap());
            SyncAgent::new(self.legacy.clone(), registry, federation_key(), store, &state)
        }
    }

    fn now() -> Timestamp {
        parse_timestamp("2016-05-01T09:00:00+08:00").unwrap()
    }

    #[tokio::test]
    async fn pushes_then_quiesces() {
        let rows: Vec<LegacyRow> = (0..100).map(|i| row(i, 1)).collect();
        let rig = Rig::new(&rows);
        let agent = rig.agent("a");
        let index = PatientIndex::in_memory();
        let first = agent.sync_run(&index, &now()).await.unwrap();
        assert_eq!((first.extracted, first.converted, first.pushed), (100, 100, 100));
        assert!(first.errors.is_empty());
        assert_eq!(index.len(), 100);
        let second = agent.sync_run(&index, &now()).await.unwrap();
        assert_eq!((second.extracted, second.pushed), (0, 0));
        assert_eq!(second.high_water_mark, first.high_water_mark);
    }

    #[tokio::test]
    async fn updated_rows_replace_entries() {
        let mut rows: Vec<LegacyRow> = (0..10).map(|i| row(i, 1)).collect();
        let rig = Rig::new(&rows);
        let agent = rig.agent("a");
        let index = PatientIndex::in_memory();
        agent.sync_run(&index, &now()).await.unwrap();

        rows[3].fields.insert("visit_time".into(), "2015-09-30 10:00".into());
        rows[3].version = 2;
        rows[3].mtime = parse_timestamp("2016-02-01T00:00:00+08:00").unwrap();
        rig.legacy.write_rows(&rows).unwrap();
        let report = agent.sync_run(&index, &now()).await.unwrap();
        assert_eq!((report.extracted, report.pushed), (1, 1));
        let e = index.entries().into_iter().find(|e| e.ehr_id == "0003").unwrap();
        assert_eq!(e.sync_version, 2);
        assert_eq!(e.recorded_at, parse_timestamp("2015-09-30T10:00:00+08:00").unwrap());
    }

    #[tokio::test]
    async fn index_outage_keeps_mark_and_retries() {
        let rows: Vec<LegacyRow> = (0..20).map(|i| row(i, 1)).collect();
        let rig = Rig::new(&rows);

        let clean = PatientIndex::in_memory();
        rig.agent("clean").sync_run(&clean, &now()).await.unwrap();

        let agent = rig.agent("flaky");
        let sink = Flaky {
            index: PatientIndex::in_memory(),
            down: AtomicBool::new(true),
        };
        let failed = agent.sync_run(&sink, &now()).await.unwrap();
        assert_eq!(failed.pushed, 0);
        assert!(!failed.errors.is_empty());
        assert_eq!(agent.high_water_mark().unwrap(), epoch());

        sink.down.store(false, Ordering::SeqCst);
        let retry = agent.sync_run(&sink, &now()).await.unwrap();
        assert_eq!(retry.pushed, 20);
        assert_eq!(sink.index.fingerprint(), clean.fingerprint());
    }

    #[tokio::test]
    async fn crash_points_converge() {
        let rows: Vec<LegacyRow> = (0..30).map(|i| row(i, 1)).collect();
        let rig = Rig::new(&rows);
        let clean = PatientIndex::in_memory();
        rig.agent("clean").sync_run(&clean, &now()).await.unwrap();

        for (i, point) in [CrashPoint::AfterExtract, CrashPoint::AfterStore, CrashPoint::AfterPush]
            .into_iter()
            .enumerate()
        {
            let state = format!("crash{i}");
            let index = PatientIndex::in_memory();
            let agent = rig.agent(&state);
            agent.inject_crash(point);
            assert!(agent.sync_run(&index, &now()).await.is_err());
            assert_eq!(agent.high_water_mark().unwrap(), epoch());
            // restart from persisted state only
            let agent = rig.agent(&state);
            agent.sync_run(&index, &now()).await.unwrap();
            assert_eq!(index.fingerprint(), clean.fingerprint(), "{point:?}");
        }
    }

    #[tokio::test]
    async fn unconvertible_rows_reported() {
        let mut rows: Vec<LegacyRow> = (0..5).map(|i| row(i, 1)).collect();
        rows[2].fields.insert("visit_time".into(), "yesterday".into());
        rows[4].fields.remove("card_id");
        let rig = Rig::new(&rows);
        let index = PatientIndex::in_memory();
        let report = rig.agent("a").sync_run(&index, &now()).await.unwrap();
        assert_eq!((report.extracted, report.converted, report.pushed), (5, 3, 3));
        let keys: Vec<&str> = report.errors.iter().map(|e| e.key.as_str()).collect();
        assert_eq!(keys, ["HC/0002", "HC/0004"]);
    }

    struct Slow;

    impl IndexSink for Slow {
        async fn upsert(&self, entries: &[IndexEntry]) -> Result<usize, ServiceError> {
            tokio::time::sleep(std::time::Duration::from_millis(200)).await;
            Ok(entries.len())
        }
    }

    #[tokio::test]
    async fn single_flight() {
        let rows: Vec<LegacyRow> = (0..3).map(|i| row(i, 1)).collect();
        let rig = Rig::new(&rows);
        let agent = rig.agent("a");
        let t = now();
        let (a, b) = tokio::join!(agent.sync_run(&Slow, &t), agent.sync_run(&Slow, &t));
        let statuses: Vec<Option<u16>> = [&a, &b].iter().map(|r| r.as_ref().err().map(|e| e.status())).collect();
        assert!(statuses.contains(&None));
        assert!(statuses.contains(&Some(409)));
    }
}
