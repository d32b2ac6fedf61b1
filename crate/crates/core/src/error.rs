use thiserror::Error;

use crate::catalog::{CatalogError, TxnStatus};
use crate::datafile::FileError;
use crate::dcp::DcpError;
use crate::manifest::ManifestError;
use crate::object_store::StoreError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("transaction is no longer active ({0:?})")]
    TxnClosed(TxnStatus),
    #[error("unknown table {0}")]
    UnknownTable(String),
    #[error("table {0} already exists")]
    TableExists(String),
    /// Write-write conflict or serialization failure; the caller may retry.
    #[error("transaction conflict: {0}")]
    Conflict(CatalogError),
    #[error(transparent)]
    Catalog(CatalogError),
    #[error(transparent)]
    File(#[from] FileError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Task(#[from] DcpError),
    #[error("as-of point {0} is outside the retention window")]
    OutOfRetention(String),
    #[error("table {0} was written in this transaction; as-of reads are not allowed on it")]
    AsOfAfterWrite(String),
    #[error("{0}")]
    Invalid(String),
}

impl EngineError {
    pub fn is_conflict(&self) -> bool {
        matches!(self, Self::Conflict(_))
    }
}

impl From<CatalogError> for EngineError {
    fn from(e: CatalogError) -> Self {
        if e.is_retryable() {
            Self::Conflict(e)
        } else {
            Self::Catalog(e)
        }
    }
}

pub type EngineResult<T> = Result<T, EngineError>;
