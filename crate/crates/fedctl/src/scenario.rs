//! The "seeing a doctor" walk-through: login, consent by ID scan, locate,
//! fan-out transfer and display, recorded step by step.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use ehrfed_core::auth::ConsentScope;
use ehrfed_core::index::{LocateQuery, LocateRow};
use ehrfed_core::model::rfc3339;
use ehrfed_core::node::{FanoutFailure, FanoutResult};
use ehrfed_core::{EhrType, PatientRef, ServiceError, Timestamp};
use ehrfed_server::{HttpClient, IndexClient, NodeClient, Topology};
use serde::{Deserialize, Serialize};

use crate::manifest::Manifest;

/// Where the servers of one federation answer.
#[derive(Debug, Clone)]
pub struct Endpoints {
    pub index_url: String,
    pub nodes: BTreeMap<String, String>,
    pub http: HttpClient,
}

impl Endpoints {
    pub fn from_topology(t: &Topology, http: HttpClient) -> Self {
        Endpoints {
            index_url: t.index_url(),
            nodes: t.hospital_urls(),
            http,
        }
    }

    pub fn index(&self) -> IndexClient {
        IndexClient::new(&self.index_url, self.http.clone())
    }

    pub fn node(&self, hospital_id: &str) -> Option<NodeClient> {
        self.nodes.get(hospital_id).map(|u| NodeClient::new(u, self.http.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub step: u8,
    pub actor: String,
    pub action: String,
    pub outcome: Outcome,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub audit_events: Vec<u64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchedRecord {
    pub hospital_id: String,
    pub ehr_id: String,
    pub ehr_type: EhrType,
    #[serde(with = "rfc3339")]
    pub recorded_at: Timestamp,
    /// Audit event the serving hospital wrote for this record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_event: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioTranscript {
    pub at_hospital: String,
    pub doctor_id: String,
    pub patient_ref: Option<PatientRef>,
    pub steps: Vec<Step>,
    pub rows: Vec<LocateRow>,
    pub records: Vec<FetchedRecord>,
    pub failures: Vec<FanoutFailure>,
    pub completed: bool,
}

impl ScenarioTranscript {
    /// The transcript with everything timing-dependent removed, for
    /// run-to-run comparison: latencies, failure messages, and which audit
    /// event went with which record (concurrent transfers to one hospital
    /// are numbered in arrival order). Each step keeps its set of events.
    pub fn normalized(&self) -> ScenarioTranscript {
        let mut t = self.clone();
        for s in &mut t.steps {
            s.latency_ms = 0;
            s.audit_events.sort_unstable();
        }
        for r in &mut t.records {
            r.audit_event = None;
        }
        for f in &mut t.failures {
            f.message.clear();
        }
        t
    }

    /// Successful locate calls made against the index.
    pub fn locate_calls(&self) -> usize {
        self.steps.iter().filter(|s| s.step == 12).map(|s| s.audit_events.len()).sum()
    }

    /// Records transferred, by serving hospital.
    pub fn transfers_by_hospital(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.hospital_id.clone()).or_insert(0) += 1;
        }
        m
    }

    /// Step numbers never go backwards and every transfer comes after a locate.
    pub fn is_well_ordered(&self) -> bool {
        let ordered = self.steps.windows(2).all(|w| w[0].step <= w[1].step);
        let first_locate = self.steps.iter().position(|s| s.step == 11);
        let first_transfer = self.steps.iter().position(|s| s.step == 14);
        ordered
            && match (first_locate, first_transfer) {
                (_, None) => true,
                (Some(l), Some(t)) => l < t,
                (None, Some(_)) => false,
            }
    }
}

#[derive(Debug, Clone)]
pub struct SeeDoctor {
    /// What the patient's ID card scan reads.
    pub scan: String,
    pub at_hospital: String,
    pub doctor_id: String,
    pub secret: String,
    pub date_from: Timestamp,
    pub date_to: Timestamp,
    pub ehr_types: Vec<EhrType>,
    pub hospitals: Vec<String>,
}

struct Recorder {
    steps: Vec<Step>,
}

impl Recorder {
    fn push(&mut self, step: u8, actor: &str, action: impl Into<String>, outcome: Outcome, since: Option<Instant>) -> &mut Step {
        self.steps.push(Step {
            step,
            actor: actor.into(),
            action: action.into(),
            outcome,
            latency_ms: since.map_or(0, |t| t.elapsed().as_millis() as u64),
            audit_events: Vec::new(),
            detail: String::new(),
        });
        self.steps.last_mut().expect("just pushed")
    }

    fn fail(&mut self, step: u8, actor: &str, action: &str, err: &ServiceError, since: Instant) {
        self.push(step, actor, action, Outcome::Failed, Some(since)).detail = format!("{}: {}", err.class.code(), err.message);
    }
}

/// Runs the walk-through. Failures end the run early and are recorded in
/// the transcript; nothing is raised.
pub async fn see_doctor(ep: &Endpoints, req: &SeeDoctor) -> ScenarioTranscript {
    let at = req.at_hospital.as_str();
    let mut rec = Recorder { steps: Vec::new() };
    let mut transcript = ScenarioTranscript {
        at_hospital: at.to_string(),
        doctor_id: req.doctor_id.clone(),
        patient_ref: None,
        steps: Vec::new(),
        rows: Vec::new(),
        records: Vec::new(),
        failures: Vec::new(),
        completed: false,
    };
    let finish = |mut t: ScenarioTranscript, rec: Recorder| {
        t.steps = rec.steps;
        t
    };
    let Some(client) = ep.node(at) else {
        let err = ServiceError::validation(format!("hospital {at} is not in the topology"));
        rec.fail(1, "doctor", "open the EHR sharing client", &err, Instant::now());
        return finish(transcript, rec);
    };

    rec.push(1, "doctor", format!("enter credentials at {at}"), Outcome::Ok, None);
    let t = Instant::now();
    rec.push(2, &format!("{at} client"), "send login request", Outcome::Ok, None);
    let doctor = match client.login(&req.doctor_id, &req.secret, at).await {
        Ok(token) => token,
        Err(e) => {
            rec.fail(3, &format!("{at} auth"), "verify credentials", &e, t);
            return finish(transcript, rec);
        }
    };
    rec.push(3, &format!("{at} auth"), "verify credentials, issue doctor token", Outcome::Ok, Some(t));
    rec.push(4, &format!("{at} client"), "session open", Outcome::Ok, None);

    let types = if req.ehr_types.is_empty() {
        "all types".to_string()
    } else {
        req.ehr_types.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(",")
    };
    rec.push(5, "doctor", "compose locate query", Outcome::Ok, None).detail = format!(
        "{} .. {}, {types}",
        req.date_from.format("%Y-%m-%d"),
        req.date_to.format("%Y-%m-%d")
    );

    rec.push(6, "patient", "scan ID card", Outcome::Ok, None);
    let t = Instant::now();
    rec.push(7, &format!("{at} client"), "send consent request", Outcome::Ok, None);
    let scope = ConsentScope {
        from: req.date_from,
        to: req.date_to,
        types: req.ehr_types.clone(),
    };
    let consent = match client.consent(&doctor, &req.scan, &scope).await {
        Ok(token) => token,
        Err(e) => {
            rec.fail(8, &format!("{at} auth"), "derive patient reference", &e, t);
            return finish(transcript, rec);
        }
    };
    let elapsed = Some(t);
    rec.push(8, &format!("{at} auth"), "derive patient reference from scan", Outcome::Ok, None);
    rec.push(9, &format!("{at} auth"), "issue consent token", Outcome::Ok, elapsed);
    rec.push(10, &format!("{at} client"), "consent confirmed", Outcome::Ok, None);

    let Some(patient_ref) = consent_subject(&consent) else {
        let err = ServiceError::internal("consent token carries no patient reference");
        rec.fail(11, &format!("{at} client"), "send locate request", &err, Instant::now());
        return finish(transcript, rec);
    };
    transcript.patient_ref = Some(patient_ref.clone());

    let mut query = LocateQuery::new(patient_ref, req.date_from, req.date_to);
    query.ehr_types = req.ehr_types.clone();
    query.hospitals = req.hospitals.clone();
    let index = ep.index();
    let t = Instant::now();
    let mut events = Vec::new();
    let mut rows = Vec::new();
    loop {
        match index.locate(&query, &doctor, &consent).await {
            Ok((page, event)) => {
                events.extend(event);
                rows.extend(page.rows);
                match page.next_cursor {
                    Some(c) => query.cursor = Some(c),
                    None => break,
                }
            }
            Err(e) => {
                rec.fail(11, &format!("{at} client"), "send locate request", &e, t);
                return finish(transcript, rec);
            }
        }
    }
    rec.push(11, &format!("{at} client"), "send locate request", Outcome::Ok, Some(t));
    rec.push(12, "index", "log locate", Outcome::Ok, None).audit_events = events;
    rec.push(13, "index", "return located rows", Outcome::Ok, None).detail = format!("rows={}", rows.len());

    let mut per_hospital: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &rows {
        *per_hospital.entry(r.location.as_str()).or_insert(0) += 1;
    }
    let remote: Vec<(&str, usize)> = per_hospital.iter().filter(|(h, _)| **h != at).map(|(h, n)| (*h, *n)).collect();
    for (h, n) in &remote {
        rec.push(14, &format!("{at} client"), format!("request transfer from {h}"), Outcome::Ok, None).detail =
            format!("rows={n}");
    }

    let t = Instant::now();
    let result = if rows.is_empty() {
        Ok(FanoutResult::default())
    } else {
        client.fanout(&rows, &doctor, &consent).await
    };
    let result = match result {
        Ok(r) => r,
        Err(e) => {
            rec.fail(16, &format!("{at} client"), "receive records", &e, t);
            transcript.rows = rows;
            return finish(transcript, rec);
        }
    };
    let failed: BTreeSet<&str> = result.failures.iter().map(|f| f.hospital_id.as_str()).collect();
    let mut events_by_hospital: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for e in &result.events {
        events_by_hospital.entry(e.hospital_id.as_str()).or_default().extend(e.event_id);
    }
    for (h, _) in &remote {
        let step = rec.push(15, h, "log transfers", if failed.contains(h) { Outcome::Failed } else { Outcome::Ok }, None);
        step.audit_events = events_by_hospital.get(h).cloned().unwrap_or_default();
    }
    for (h, n) in &per_hospital {
        let action = if *h == at {
            "read local records".to_string()
        } else {
            format!("receive records from {h}")
        };
        match result.failures.iter().find(|f| f.hospital_id == *h) {
            Some(f) => {
                rec.push(16, h, action, Outcome::Failed, Some(t)).detail = format!("{}: {} row(s) not returned", f.error_class, f.rows)
            }
            None => {
                let step = rec.push(16, h, action, Outcome::Ok, Some(t));
                step.detail = format!("records={n}");
                if *h == at {
                    step.audit_events = events_by_hospital.get(h).cloned().unwrap_or_default();
                }
            }
        }
    }
    let outcome = if result.failures.is_empty() { Outcome::Ok } else { Outcome::Partial };
    rec.push(17, &format!("{at} client"), "display records to doctor", outcome, None).detail =
        format!("records={} failures={}", result.records.len(), result.failures.len());

    transcript.rows = rows;
    transcript.records = result
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| FetchedRecord {
            hospital_id: r.hospital_id.clone(),
            ehr_id: r.ehr_id.clone(),
            ehr_type: r.ehr_type,
            recorded_at: r.recorded_at,
            audit_event: result.events.get(i).and_then(|e| e.event_id),
        })
        .collect();
    transcript.failures = result.failures;
    transcript.completed = true;
    finish(transcript, rec)
}

/// Reads the patient reference out of a consent token's claims segment.
/// The client cannot check the signature; the servers do.
fn consent_subject(token: &str) -> Option<PatientRef> {
    use base64::Engine;
    let claims = token.split('.').nth(1)?;
    let bytes = base64::engine::general_purpose::URL_SAFE_NO_PAD.decode(claims).ok()?;
    let v: serde_json::Value = serde_json::from_slice(&bytes).ok()?;
    PatientRef::parse(v.get("patient_ref")?.as_str()?).ok()
}

/// Differences between a transcript and the manifest's answer for the same
/// query. Empty when they agree.
pub fn check_against_manifest(t: &ScenarioTranscript, manifest: &Manifest, req: &SeeDoctor) -> Vec<String> {
    let mut problems = Vec::new();
    if !t.completed {
        problems.push("scenario did not complete".to_string());
        return problems;
    }
    if !t.is_well_ordered() {
        problems.push("steps out of order".to_string());
    }
    let Some(patient_ref) = &t.patient_ref else {
        problems.push("no patient reference".to_string());
        return problems;
    };
    match manifest.patients.iter().find(|p| p.national_id == req.scan) {
        Some(p) if p.patient_ref == *patient_ref => {}
        Some(_) => problems.push("consent names a different patient reference than the manifest".to_string()),
        None => problems.push("scanned ID is not in the manifest".to_string()),
    }
    let mut q = LocateQuery::new(patient_ref.clone(), req.date_from, req.date_to);
    q.ehr_types = req.ehr_types.clone();
    q.hospitals = req.hospitals.clone();
    let want = manifest.locate(&q);
    if t.rows != want {
        let got: BTreeSet<(&str, &str)> = t.rows.iter().map(|r| (r.location.as_str(), r.ehr_id.as_str())).collect();
        let exp: BTreeSet<(&str, &str)> = want.iter().map(|r| (r.location.as_str(), r.ehr_id.as_str())).collect();
        problems.push(format!(
            "locate rows differ from manifest: {} missing, {} extra, order {}",
            exp.difference(&got).count(),
            got.difference(&exp).count(),
            if exp == got { "differs" } else { "n/a" }
        ));
    }
    let failed: BTreeSet<&str> = t.failures.iter().map(|f| f.hospital_id.as_str()).collect();
    let expected_records: Vec<(&str, &str)> = want
        .iter()
        .filter(|r| !failed.contains(r.location.as_str()))
        .map(|r| (r.location.as_str(), r.ehr_id.as_str()))
        .collect();
    let got_records: Vec<(&str, &str)> = t.records.iter().map(|r| (r.hospital_id.as_str(), r.ehr_id.as_str())).collect();
    if got_records != expected_records {
        problems.push(format!(
            "transferred records differ from manifest: got {}, expected {}",
            got_records.len(),
            expected_records.len()
        ));
    }
    for r in &t.records {
        match manifest.record(&r.hospital_id, &r.ehr_id) {
            Some(m) if m.patient_ref == *patient_ref && m.recorded_at == r.recorded_at && m.ehr_type == r.ehr_type => {}
            _ => problems.push(format!("record {}/{} does not match the manifest", r.hospital_id, r.ehr_id)),
        }
    }
    problems
}
