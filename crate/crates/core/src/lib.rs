//! Transactional log-structured tables over an object store.
//!
//! Tables are immutable columnar data files plus delete vectors, tracked by
//! per-transaction manifests. A multi-version catalog orders committed
//! manifests and detects write-write conflicts.

pub mod catalog;
pub mod clock;
pub mod config;
pub mod datafile;
pub mod dcp;
pub mod error;
pub mod maintenance;
pub mod manifest;
pub mod object_store;
pub mod paths;
pub mod txn;

pub use catalog::{Catalog, Isolation};
pub use config::EngineConfig;
pub use error::{EngineError, EngineResult};
pub use txn::{AsOf, Database, Granularity, Predicate, ScanOptions, TableSpec, Txn};
