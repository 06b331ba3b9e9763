//! Embedded memory base: schema-constrained event and entity memories,
//! patch-based entity updates, and weighted hybrid recall.

pub mod bench;
pub mod embed;
pub mod engine;
pub mod error;
pub mod eua;
pub mod extraction;
pub mod operators;
pub mod prompts;
pub mod provider;
pub mod retrieval;
pub mod schema;
pub mod segmentation;
pub mod service;
pub mod store;

pub use error::{Error, Result};
