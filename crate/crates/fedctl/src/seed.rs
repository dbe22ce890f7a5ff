//! Deterministic fixture generation. The same spec always produces the same
//! bytes on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{Duration, TimeZone};
use ehrfed_core::auth::{Role, SigningKey};
use ehrfed_core::deid::{hash_patient_id, FederationKey};
use ehrfed_core::legacy::{fixture_mapping, SourceRecord};
use ehrfed_core::model::parse_timestamp;
use ehrfed_core::{EhrType, Timestamp};
use ehrfed_server::config::DurabilityMode;
use ehrfed_server::layout::{Account, FederationLayout, HospitalLayout};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{Manifest, ManifestPatient, ManifestRecord, MANIFEST_FILE};

pub const DOCTORS_FILE: &str = "doctors.json";

pub const FIXTURE_PATIENT_NAME: &str = "Yang Yingying";
pub const FIXTURE_NATIONAL_ID: &str = "M1234567";
pub const FIXTURE_HOSPITAL: &str = "HC";
pub const FIXTURE_EHR_ID: &str = "0221";
pub const FIXTURE_RECORDED_AT: &str = "2015-09-30T10:00:00+08:00";

#[derive(Debug, Error)]
pub enum SeedError {
    #[error("invalid seed request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub patients: usize,
    pub records: usize,
    pub hospitals: Vec<String>,
    pub rng_seed: u64,
    /// Share of records that are not hemodialysis sessions.
    pub other_type_ratio: f64,
    /// Share of records the hospital has not marked for sharing.
    pub unshared_ratio: f64,
    /// Index listens here, hospitals on the following ports. 0 means
    /// ephemeral ports for every server.
    pub base_port: u16,
    pub durability: DurabilityMode,
}

impl SeedSpec {
    pub fn new(patients: usize, records: usize, hospitals: &[&str], rng_seed: u64) -> Self {
        SeedSpec {
            patients,
            records,
            hospitals: hospitals.iter().map(|h| h.to_string()).collect(),
            rng_seed,
            other_type_ratio: 0.0,
            unshared_ratio: 0.0,
            base_port: 7400,
            durability: DurabilityMode::Fsync,
        }
    }

    fn check(&self) -> Result<(), SeedError> {
        let bad = |m: String| Err(SeedError::Invalid(m));
        if self.patients == 0 {
            return bad("at least one patient is needed".into());
        }
        if self.records < self.patients {
            return bad(format!("{} records cannot cover {} patients", self.records, self.patients));
        }
        if self.hospitals.is_empty() {
            return bad("no hospitals given".into());
        }
        let distinct: BTreeSet<&String> = self.hospitals.iter().collect();
        if distinct.len() != self.hospitals.len() {
            return bad("hospital listed twice".into());
        }
        if let Some(h) = self.hospitals.iter().find(|h| fixture_mapping(h).is_none()) {
            return bad(format!("no legacy format defined for hospital {h}"));
        }
        for (name, r) in [("other_type_ratio", self.other_type_ratio), ("unshared_ratio", self.unshared_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must be within [0, 1]"));
            }
        }
        if self.base_port != 0 && usize::from(self.base_port) + self.hospitals.len() > usize::from(u16::MAX) {
            return bad("port range overflows".into());
        }
        Ok(())
    }
}

/// Plaintext login material the harness uses. Hospitals only store digests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoctorLogin {
    pub doctor_id: String,
    pub role: Role,
    pub secret: String,
}

pub type DoctorBook = BTreeMap<String, Vec<DoctorLogin>>;

pub fn load_doctors(dir: &Path) -> std::io::Result<DoctorBook> {
    let text = std::fs::read_to_string(dir.join(DOCTORS_FILE))?;
    serde_json::from_str(&text).map_err(std::io::Error::other)
}

#[derive(Debug)]
pub struct Seeded {
    pub topology: PathBuf,
    pub manifest: Manifest,
    pub doctors: DoctorBook,
}

const SURNAMES: [&str; 24] = [
    "Chan", "Wong", "Lei", "Leong", "Ho", "Lam", "Cheong", "Lou", "Sou", "Chao", "Kuan", "Ieong", "Choi", "Fong",
    "Lao", "Tam", "Wu", "Lee", "Ng", "Cheang", "Vong", "Chui", "Iao", "Pun",
];
const GIVEN: [&str; 24] = [
    "Ka Man", "Weng Ian", "Sio Kei", "Mei Ling", "Chi Keong", "Hoi Ian", "Kin Fai", "Wai Man", "Ut Mei", "Chon Kit",
    "Ka Wai", "Sok I", "Man Hou", "Lai Kuan", "Hou Kin", "Pui San", "Chi Wa", "Iok Lan", "Kam Fong", "Tak Meng",
    "Wing Sze", "Cheng Hin", "Lok Yi", "Si Man",
];
const ZH_SURNAMES: [&str; 12] = ["陳", "黃", "李", "梁", "何", "林", "張", "盧", "蘇", "周", "關", "楊"];
const ZH_GIVEN: [&str; 16] = [
    "美玲", "志明", "家文", "詠欣", "嘉偉", "淑儀", "文豪", "麗君", "俊傑", "佩珊", "子華", "玉蘭", "錦芳", "德明",
    "穎思", "正軒",
];
const DIALYZERS: [&str; 6] = ["FX60", "FX80", "FX100", "Polyflux 17L", "Rexeed-18S", "Elisio-19H"];
const NOTES_EN: [&str; 6] = [
    "stable session",
    "mild hypotension at hour 3",
    "cramps, UF rate reduced",
    "access flow good",
    "no complications",
    "headache after session",
];
const NOTES_ZH: [&str; 6] = ["過程穩定", "第三小時輕微低血壓", "抽筋，減慢脫水", "血管通路良好", "無併發症", "治療後頭痛"];
const SUMMARIES: [&str; 4] = [
    "within reference range",
    "follow-up in three months",
    "no acute findings",
    "dose unchanged",
];

fn patient_names(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut names = vec![FIXTURE_PATIENT_NAME.to_string()];
    let mut seen: BTreeSet<String> = names.iter().cloned().collect();
    while names.len() < n {
        let name = if rng.random_bool(0.3) {
            format!("{}{}", ZH_SURNAMES.choose(rng).unwrap(), ZH_GIVEN.choose(rng).unwrap())
        } else {
            format!("{} {}", SURNAMES.choose(rng).unwrap(), GIVEN.choose(rng).unwrap())
        };
        let name = if seen.contains(&name) {
            format!("{name} {}", names.len())
        } else {
            name
        };
        if seen.insert(name.clone()) {
            names.push(name);
        }
    }
    names.truncate(n);
    names
}

fn national_ids(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut ids = vec![FIXTURE_NATIONAL_ID.to_string()];
    let mut seen: BTreeSet<String> = ids.iter().cloned().collect();
    while ids.len() < n {
        let letter = (b'A' + rng.random_range(0..26u8)) as char;
        let id = format!("{letter}{:07}", rng.random_range(0..10_000_000u32));
        if seen.insert(id.clone()) {
            ids.push(id);
        }
    }
    ids.truncate(n);
    ids
}

fn local(y: i32, m: u32, d: u32) -> Timestamp {
    chrono::FixedOffset::east_opt(8 * 3600)
        .unwrap()
        .with_ymd_and_hms(y, m, d, 0, 0, 0)
        .single()
        .expect("valid fixture date")
}

fn hemodialysis_payload(rng: &mut ChaCha8Rng, language: &str) -> BTreeMap<String, String> {
    let pre: u32 = rng.random_range(450..950);
    let loss: u32 = rng.random_range(5..40);
    let notes = if language == "zh" { NOTES_ZH.choose(rng) } else { NOTES_EN.choose(rng) };
    [
        ("pre_weight_kg", format!("{}.{}", pre / 10, pre % 10)),
        ("post_weight_kg", format!("{}.{}", (pre - loss) / 10, (pre - loss) % 10)),
        ("systolic_mmHg", rng.random_range(100..181u32).to_string()),
        ("diastolic_mmHg", rng.random_range(55..101u32).to_string()),
        ("duration_min", rng.random_range(180..271u32).to_string()),
        ("dialyzer_model", DIALYZERS.choose(rng).unwrap().to_string()),
        ("notes", notes.unwrap().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Generates the fixture and writes it under `out`.
pub fn seed(spec: &SeedSpec, out: &Path) -> Result<Seeded, SeedError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let federation_key = FederationKey::new(rng.random());
    let signing_keys: Vec<SigningKey> = spec.hospitals.iter().map(|_| SigningKey::new(rng.random())).collect();

    let names = patient_names(&mut rng, spec.patients);
    let ids = national_ids(&mut rng, spec.patients);
    let patients: Vec<ManifestPatient> = (0..spec.patients)
        .map(|i| ManifestPatient {
            index: i,
            national_id: ids[i].clone(),
            name: names[i].clone(),
            patient_ref: hash_patient_id(&ids[i], &federation_key).expect("generated ids are non-empty"),
        })
        .collect();

    let mut doctors = DoctorBook::new();
    for h in &spec.hospitals {
        let mut surnames = SURNAMES.to_vec();
        surnames.shuffle(&mut rng);
        let mut book: Vec<DoctorLogin> = surnames[..3]
            .iter()
            .map(|s| DoctorLogin {
                doctor_id: format!("dr-{}", s.to_lowercase()),
                role: Role::Doctor,
                secret: format!("{:016x}", rng.random::<u64>()),
            })
            .collect();
        book.push(DoctorLogin {
            doctor_id: "admin".into(),
            role: Role::Admin,
            secret: format!("{:016x}", rng.random::<u64>()),
        });
        doctors.insert(h.clone(), book);
    }

    // every patient gets one record, the rest are spread at random
    let mut owners: Vec<usize> = (0..spec.patients).collect();
    owners.extend((spec.patients..spec.records).map(|_| rng.random_range(0..spec.patients)));
    owners.shuffle(&mut rng);
    if let Some(pos) = owners.iter().position(|&p| p == 0) {
        owners.swap(0, pos);
    }

    let start = local(2010, 1, 1);
    let span_minutes = (local(2017, 1, 1) - start).num_minutes();
    let fixture_at = parse_timestamp(FIXTURE_RECORDED_AT).expect("fixture timestamp parses");
    let has_fixture_hospital = spec.hospitals.iter().any(|h| h == FIXTURE_HOSPITAL);
    let mut next_id: BTreeMap<&str, u32> = spec.hospitals.iter().map(|h| (h.as_str(), 1)).collect();
    let mut records: BTreeMap<&str, Vec<SourceRecord>> = spec.hospitals.iter().map(|h| (h.as_str(), Vec::new())).collect();
    let mut manifest_records = Vec::new();

    for (n, &owner) in owners.iter().enumerate() {
        let fixture = n == 0 && has_fixture_hospital;
        let hospital = if fixture {
            FIXTURE_HOSPITAL
        } else {
            spec.hospitals.choose(&mut rng).unwrap().as_str()
        };
        let ehr_id = if fixture {
            FIXTURE_EHR_ID.to_string()
        } else {
            let counter = next_id.get_mut(hospital).unwrap();
            if has_fixture_hospital && hospital == FIXTURE_HOSPITAL && format!("{:04}", *counter) == FIXTURE_EHR_ID {
                *counter += 1;
            }
            let id = format!("{:04}", *counter);
            *counter += 1;
            id
        };
        let recorded_at = if fixture {
            fixture_at
        } else {
            start + Duration::minutes(rng.random_range(0..span_minutes))
        };
        let ehr_type = if !fixture && rng.random_bool(spec.other_type_ratio) {
            *EhrType::ALL[1..].choose(&mut rng).unwrap()
        } else {
            EhrType::Hemodialysis
        };
        let language = if rng.random_bool(0.5) { "zh" } else { "en" };
        let payload = if ehr_type == EhrType::Hemodialysis {
            hemodialysis_payload(&mut rng, language)
        } else {
            BTreeMap::from([("summary".to_string(), SUMMARIES.choose(&mut rng).unwrap().to_string())])
        };
        let shared = fixture || !rng.random_bool(spec.unshared_ratio);
        let doctor = doctors[hospital].iter().filter(|d| d.role == Role::Doctor).collect::<Vec<_>>();
        let doctor = doctor.choose(&mut rng).unwrap();
        let doctor_name = format!("Dr. {}", capitalize(doctor.doctor_id.trim_start_matches("dr-")));
        let mtime = recorded_at + Duration::minutes(rng.random_range(30..60 * 24 * 14));

        let patient = &patients[owner];
        records.get_mut(hospital).unwrap().push(SourceRecord {
            national_id: patient.national_id.clone(),
            patient_name: patient.name.clone(),
            doctor_name,
            ehr_id: ehr_id.clone(),
            ehr_type,
            recorded_at,
            language: language.into(),
            payload,
            shared,
            mtime,
            version: 1,
        });
        manifest_records.push(ManifestRecord {
            hospital_id: hospital.to_string(),
            ehr_id,
            patient_index: owner,
            patient_ref: patient.patient_ref.clone(),
            ehr_type,
            recorded_at,
            shared,
        });
    }
    manifest_records.sort_by(|a, b| (&a.hospital_id, &a.ehr_id).cmp(&(&b.hospital_id, &b.ehr_id)));

    let port = |i: usize| -> u16 {
        if spec.base_port == 0 {
            0
        } else {
            spec.base_port + i as u16
        }
    };
    let layout = FederationLayout {
        federation_key,
        durability: spec.durability,
        index_listen: ([127, 0, 0, 1], port(0)).into(),
        hospitals: spec
            .hospitals
            .iter()
            .zip(signing_keys)
            .enumerate()
            .map(|(i, (h, key))| {
                let accounts = doctors[h].iter().map(|d| Account::new(&d.doctor_id, d.role, &d.secret)).collect();
                let mut hl = HospitalLayout::fixture(h, key, accounts, records.remove(h.as_str()).unwrap());
                hl.listen = ([127, 0, 0, 1], port(i + 1)).into();
                hl
            })
            .collect(),
    };
    std::fs::create_dir_all(out)?;
    let topology = layout.write(out)?;

    let manifest = Manifest {
        spec: spec.clone(),
        patients,
        records: manifest_records,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    write_json(&out.join(DOCTORS_FILE), &doctors)?;
    Ok(Seeded {
        topology,
        manifest,
        doctors,
    })
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)
}
