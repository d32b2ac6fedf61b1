//! Append-only commit journal.
//!
//! Each record is `len: u32 LE | crc32(payload): u32 LE | payload`, where the
//! payload is one JSON encoded [`JournalRecord`]. A torn final record (short
//! or failing its checksum at the end of the file) is dropped on open;
//! damage anywhere else is reported as corruption.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::rows::{Key, Row};
use super::{CatalogError, CatalogResult, Version};

pub const JOURNAL_FILE: &str = "catalog.journal";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub version: Version,
    pub txn: u64,
    pub next_sequence: u64,
    pub writes: Vec<(Key, Option<Row>)>,
    /// Begin timestamps up to this value may already be in use.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub reserved: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

fn io_err(path: &Path, e: std::io::Error) -> CatalogError {
    CatalogError::Journal(format!("{}: {e}", path.display()))
}

impl Journal {
    /// Opens (creating if needed) the journal in `dir` and returns the
    /// records it holds.
    pub fn open(dir: &Path) -> CatalogResult<(Self, Vec<JournalRecord>)> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(JOURNAL_FILE);
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| io_err(&path, e))?;
        let (records, good) = decode_records(&bytes)?;
        if good < bytes.len() {
            log::warn!("dropping {} torn bytes at the end of {}", bytes.len() - good, path.display());
            file.set_len(good as u64).map_err(|e| io_err(&path, e))?;
            file.seek(SeekFrom::End(0)).map_err(|e| io_err(&path, e))?;
        }
        Ok((Self { path, file }, records))
    }

    pub fn append(&mut self, record: &JournalRecord) -> CatalogResult<()> {
        let bytes = encode_record(record);
        self.file.write_all(&bytes).map_err(|e| io_err(&self.path, e))?;
        self.file.sync_data().map_err(|e| io_err(&self.path, e))
    }
}

pub fn encode_record(record: &JournalRecord) -> Vec<u8> {
    let payload = serde_json::to_vec(record).expect("journal records serialize");
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Decodes records, returning them with the length of the valid prefix.
pub fn decode_records(bytes: &[u8]) -> CatalogResult<(Vec<JournalRecord>, usize)> {
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < bytes.len() {
        if bytes.len() - pos < 8 {
            break;
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
        let end = pos + 8 + len;
        if end > bytes.len() {
            break;
        }
        let payload = &bytes[pos + 8..end];
        if crc32fast::hash(payload) != crc {
            if end == bytes.len() {
                break;
            }
            return Err(CatalogError::Corrupt(format!("journal checksum mismatch at offset {pos}")));
        }
        let record = serde_json::from_slice(payload)
            .map_err(|e| CatalogError::Corrupt(format!("journal record at offset {pos}: {e}")))?;
        out.push(record);
        pos = end;
    }
    Ok((out, pos))
}
