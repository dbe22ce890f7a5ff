//! Harness for the federated EHR exchange: deterministic fixtures, a local
//! topology, the see-doctor scenario and audit reports.

pub mod harness;
pub mod manifest;
pub mod report;
pub mod scenario;
pub mod seed;

pub use manifest::Manifest;
pub use scenario::{see_doctor, Endpoints, ScenarioTranscript, SeeDoctor};
pub use seed::{seed, SeedSpec, Seeded};
