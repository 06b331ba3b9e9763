use thiserror::Error;

use crate::eua::PatchError;
use crate::provider::ProviderError;
use crate::schema::{ConformError, SchemaError};
use crate::segmentation::SegmentationError;
use crate::store::StoreError;

/// Top-level error for engine operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Conform(#[from] ConformError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("extraction failed: {message}")]
    ExtractionFailed { message: String, raw_reply: String },
    #[error("message index gap: expected {expected}, got {got}")]
    IndexGap { expected: usize, got: usize },
    #[error("no schema installed")]
    NoSchema,
    #[error("schema rejected with {0} violation(s)")]
    InvalidSchema(usize),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown entity {entity_type}/{group_key}")]
    UnknownEntity { entity_type: String, group_key: String },
    #[error("unknown entity field {field} on {entity_type}")]
    UnknownField { entity_type: String, field: String },
    #[error("flush already in progress for session {0}")]
    FlushInProgress(String),
    #[error("unknown event {0}")]
    UnknownEvent(String),
    #[error("non-numeric value for {op} on field {field}")]
    NonNumeric { op: &'static str, field: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
