//! Legacy hospital stores and their conversion to the unified format.
//!
//! Each hospital keeps its own column names (the HC/KW/UH formats). A
//! [`FieldMapping`] per hospital renames those columns to unified names and
//! declares the type coercions (date formats, numbers) needed on the way.

mod convert;
mod mapping;
mod source;
mod store;

use std::path::Path;

use thiserror::Error;

use crate::error::ModelError;
use crate::model::ValidationReport;

pub use convert::{convert, convert_batch};
pub use mapping::{
    conversion_count, fixture_mapping, is_unified_target, pairwise_plan, Coercion, ConversionMode,
    FieldMapping, MappingEntry, MappingRegistry, TypeCoercion, LEGACY_LOCAL_OFFSET_SECS,
    REQUIRED_TARGETS,
};
pub use source::SourceRecord;
pub use store::{extract, LegacyRecord, LegacyRow, LegacyStore};

#[derive(Debug, Error)]
pub enum LegacyError {
    #[error("duplicate legacy field {0:?}")]
    DuplicateLegacyField(String),
    #[error("unified field {0:?} is mapped more than once")]
    DuplicateTarget(String),
    #[error("{0:?} is not a unified field name")]
    UnknownTarget(String),
    #[error("mapping misses required unified fields {0:?}")]
    MissingRequiredTargets(Vec<String>),
    #[error("unsupported coercion for {field}: {from} -> {to}")]
    Coercion { field: String, from: String, to: String },
    #[error("invalid mapping: {0}")]
    InvalidMapping(String),
    #[error("no mapping registered for hospital {0:?}")]
    Unregistered(String),
    #[error("legacy field {legacy:?} (for {unified}) is absent")]
    MissingField { legacy: String, unified: String },
    #[error("cannot parse {field} value {value:?}")]
    Unparseable { field: String, value: String },
    #[error(transparent)]
    Identity(#[from] ModelError),
    #[error("converted record is invalid: {0}")]
    Invalid(ValidationReport),
    #[error("store {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("store line {line}: {source}")]
    Corrupt {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LegacyError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        LegacyError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
