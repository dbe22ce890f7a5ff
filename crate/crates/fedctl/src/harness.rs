//! Pieces the CLI and the acceptance suite share: loading a seeded fixture,
//! logging in with its accounts, running scenario batches, scanning state.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::Duration;
use ehrfed_core::auth::Role;
use ehrfed_core::node::SyncReport;
use ehrfed_core::{EhrType, ServiceError, Timestamp};
use ehrfed_server::launch::{Federation, LaunchOptions};
use ehrfed_server::Topology;
use futures::stream::{self, StreamExt};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::manifest::Manifest;
use crate::scenario::{see_doctor, Endpoints, ScenarioTranscript, SeeDoctor};
use crate::seed::{load_doctors, DoctorBook, DoctorLogin};

/// A seeded fixture directory with its topology.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub dir: PathBuf,
    pub topology_path: PathBuf,
    pub topology: Topology,
    pub manifest: Manifest,
    pub doctors: DoctorBook,
}

impl Fixture {
    pub fn load(topology_path: &Path) -> anyhow::Result<Fixture> {
        let topology = Topology::load(topology_path)?;
        let dir = topology_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(Fixture {
            manifest: Manifest::load(&dir)?,
            doctors: load_doctors(&dir)?,
            dir,
            topology_path: topology_path.to_path_buf(),
            topology,
        })
    }

    pub fn account(&self, hospital_id: &str, role: Role) -> Option<&DoctorLogin> {
        self.doctors.get(hospital_id)?.iter().find(|d| d.role == role)
    }

    /// A see-doctor request for manifest patient `patient` at `hospital_id`.
    pub fn scenario(&self, patient: usize, hospital_id: &str, from: Timestamp, to: Timestamp) -> Option<SeeDoctor> {
        let doctor = self.account(hospital_id, Role::Doctor)?;
        Some(SeeDoctor {
            scan: self.manifest.patients.get(patient)?.national_id.clone(),
            at_hospital: hospital_id.to_string(),
            doctor_id: doctor.doctor_id.clone(),
            secret: doctor.secret.clone(),
            date_from: from,
            date_to: to,
            ehr_types: vec![EhrType::Hemodialysis],
            hospitals: Vec::new(),
        })
    }

    /// Scenario requests with random patients, hospitals and date windows.
    pub fn random_scenarios(&self, n: usize, rng_seed: u64) -> Vec<SeeDoctor> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let hospitals = self.topology.hospital_ids();
        (0..n)
            .filter_map(|_| {
                let patient = rng.random_range(0..self.manifest.patients.len());
                let at = hospitals.choose(&mut rng)?;
                let (from, to) = random_window(&mut rng);
                self.scenario(patient, at, from, to)
            })
            .collect()
    }

    pub async fn admin_token(&self, ep: &Endpoints, hospital_id: &str) -> Result<String, ServiceError> {
        let admin = self
            .account(hospital_id, Role::Admin)
            .ok_or_else(|| ServiceError::validation(format!("no admin account for {hospital_id}")))?;
        let node = ep
            .node(hospital_id)
            .ok_or_else(|| ServiceError::validation(format!("{hospital_id} is not in the topology")))?;
        node.login(&admin.doctor_id, &admin.secret, hospital_id).await
    }

    /// Runs one sync pass at every hospital, in topology order.
    pub async fn sync_all(&self, ep: &Endpoints) -> BTreeMap<String, Result<SyncReport, ServiceError>> {
        let mut out = BTreeMap::new();
        for h in self.topology.hospital_ids() {
            let result = match self.admin_token(ep, &h).await {
                Ok(token) => ep.node(&h).expect("listed hospital").sync_run(&token).await,
                Err(e) => Err(e),
            };
            out.insert(h, result);
        }
        out
    }
}

/// Starts every server of the fixture inside this process, on the
/// addresses its topology names (port 0 picks a free port).
pub async fn launch(fixture: &Fixture, options: LaunchOptions) -> anyhow::Result<(Federation, Endpoints)> {
    let fed = Federation::start(&fixture.topology, options).await?;
    let ep = Endpoints::from_topology(fed.topology(), fed.http().clone());
    Ok((fed, ep))
}

/// A window of one to 36 months inside the fixture's date span, with
/// day-aligned local bounds.
pub fn random_window(rng: &mut ChaCha8Rng) -> (Timestamp, Timestamp) {
    let base = ehrfed_core::model::parse_timestamp("2009-07-01T00:00:00+08:00").expect("literal");
    let from = base + Duration::days(rng.random_range(0..8 * 365));
    let to = from + Duration::days(rng.random_range(30..3 * 365));
    (from, to - Duration::seconds(1))
}

pub async fn run_batch(ep: &Endpoints, requests: &[SeeDoctor], parallel: usize) -> Vec<ScenarioTranscript> {
    stream::iter(requests)
        .map(|r| see_doctor(ep, r))
        .buffered(parallel.max(1))
        .collect()
        .await
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaintextHit {
    pub file: PathBuf,
    pub needle: String,
    pub offset: usize,
}

/// Every occurrence of any needle in any file under `dir`.
pub fn scan_for_plaintext(dir: &Path, needles: &[&str]) -> std::io::Result<(usize, Vec<PlaintextHit>)> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    files.sort();
    let needles: Vec<&str> = needles.iter().copied().filter(|n| !n.is_empty()).collect();
    let matcher = aho_corasick::AhoCorasick::new(&needles).map_err(std::io::Error::other)?;
    let mut hits = Vec::new();
    for file in &files {
        let bytes = std::fs::read(file)?;
        for m in matcher.find_overlapping_iter(&bytes) {
            hits.push(PlaintextHit {
                file: file.clone(),
                needle: needles[m.pattern().as_usize()].to_string(),
                offset: m.start(),
            });
        }
    }
    Ok((files.len(), hits))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
