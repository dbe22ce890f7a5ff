use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ehrfed_core::deid::{hash_patient_id, hash_patient_ids, FederationKey};
use ehrfed_core::index::{IndexEntry, LocateQuery, PatientIndex};
use ehrfed_core::legacy::{convert_batch, fixture_mapping, LegacyRecord, MappingRegistry};
use ehrfed_core::model::parse_timestamp;
use ehrfed_core::{EhrType, Execution};

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn key() -> FederationKey {
    FederationKey::new(std::array::from_fn(|i| i as u8))
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("M{i:07}")).collect()
}

fn hc_rows(n: usize) -> Vec<LegacyRecord> {
    let modified_at = parse_timestamp("2016-01-01T00:00:00+08:00").unwrap();
    (0..n)
        .map(|i| {
            let fields = [
                ("card_id", format!("M{:07}", i % 100)),
                ("record_id", format!("{i:05}")),
                ("p_name", "Patient".to_string()),
                ("d_name", "Dr. Chan".to_string()),
                ("visit_time", format!("201{}-0{}-1{} 10:00", i % 7, 1 + i % 9, i % 10)),
                ("rec_type", "hemodialysis".to_string()),
                ("pre_wt", "61.5".to_string()),
                ("post_wt", "59.0".to_string()),
                ("bp_sys", "140".to_string()),
                ("bp_dia", "85".to_string()),
                ("dur_min", "240".to_string()),
                ("dialyzer", "FX80".to_string()),
                ("memo", "stable".to_string()),
            ];
            LegacyRecord {
                hospital_id: "HC".into(),
                document: fields.into_iter().map(|(k, v)| (k.to_string(), v)).collect::<BTreeMap<_, _>>(),
                modified_at,
                version: 1,
            }
        })
        .collect()
}

fn bench_hashing(c: &mut Criterion) {
    let ids = ids(10_000);
    let key = key();
    let mut group = c.benchmark_group("hash_patient_ids");
    group.throughput(Throughput::Elements(ids.len() as u64));
    for mode in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &ids, |b, ids| {
            b.iter(|| hash_patient_ids(black_box(ids), &key, mode))
        });
    }
    group.finish();
}

fn bench_conversion(c: &mut Criterion) {
    let rows = hc_rows(10_000);
    let registry = MappingRegistry::new();
    registry.register(fixture_mapping("HC").unwrap()).unwrap();
    let key = key();
    let mut group = c.benchmark_group("convert_batch");
    group.throughput(Throughput::Elements(rows.len() as u64));
    for mode in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &rows, |b, rows| {
            b.iter(|| convert_batch(&registry, black_box(rows), &key, mode))
        });
    }
    group.finish();
}

fn bench_locate(c: &mut Criterion) {
    let key = key();
    let patients: Vec<_> = ids(100).iter().map(|id| hash_patient_id(id, &key).unwrap()).collect();
    let base = parse_timestamp("2010-01-01T00:00:00+08:00").unwrap();
    let entries: Vec<IndexEntry> = (0..10_000)
        .map(|i| IndexEntry {
            patient_ref: patients[i % 100].clone(),
            ehr_id: format!("{i:05}"),
            ehr_type: EhrType::Hemodialysis,
            recorded_at: base + chrono::Duration::hours(i as i64 * 5),
            location: ["HC", "KW", "UH"][i % 3].into(),
            sync_version: 1,
        })
        .collect();
    let index = PatientIndex::in_memory();
    index.upsert_entries(&entries).unwrap();
    let end = parse_timestamp("2016-12-31T23:59:59+08:00").unwrap();
    let queries: Vec<LocateQuery> = (0..1_000)
        .map(|i| {
            let from = base + chrono::Duration::days((i * 7 % 1500) as i64);
            LocateQuery::new(patients[i % 100].clone(), from, end)
        })
        .collect();
    let mut group = c.benchmark_group("locate_many");
    group.throughput(Throughput::Elements(queries.len() as u64));
    for mode in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &queries, |b, qs| {
            b.iter(|| index.locate_many(black_box(qs), mode))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_hashing, bench_conversion, bench_locate);
criterion_main!(benches);
