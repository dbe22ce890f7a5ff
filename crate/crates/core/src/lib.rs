//! Core of a federated EHR exchange between autonomous hospitals.
//!
//! Hospitals keep their records. A shared index holds only de-identified
//! references (hashed patient id, location, date, type), and a doctor fetches
//! records from the owning hospitals after two-way authentication: their own
//! login plus a scoped consent the patient grants by scanning an ID card.
//!
//! The HTTP services live in `ehrfed-server`; everything here runs in-process.

mod error;

pub mod audit;
pub mod auth;
pub mod canonical;
pub mod deid;
pub mod exec;
pub mod index;
pub mod legacy;
pub mod model;
pub mod node;

pub use error::{ErrorClass, ModelError, ServiceError};
pub use exec::Execution;
pub use model::{EhrType, PatientRef, Timestamp, UnifiedEhr};
