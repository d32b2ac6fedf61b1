//! Immutable columnar data files and delete-vector files.
//!
//! Data files are written once and never modified. Deletes and updates mask
//! rows through a [`DeleteVector`] stored in a separate file; readers apply
//! the mask when decoding (merge on read). Byte layouts are described in
//! `docs/format.md`.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::object_store::{ObjectPath, ObjectStore, StoreError};

pub const DATA_MAGIC: &[u8; 8] = b"LLCOL01\0";
pub const DV_MAGIC: &[u8; 8] = b"LLDV001\0";

#[derive(Debug, Error)]
pub enum FileError {
    #[error("data files must contain at least one row")]
    EmptyRows,
    #[error("delete vector must mark at least one row")]
    EmptyDeleteVector,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("delete vector ordinal {ordinal} out of range for {rows} rows")]
    OrdinalOutOfRange { ordinal: u64, rows: u64 },
    #[error("delete vector targets differ: {0} vs {1}")]
    TargetMismatch(ObjectPath, ObjectPath),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type FileResult<T> = Result<T, FileError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Int64,
    Float64,
    Utf8,
    Bool,
}

impl ColumnType {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "int64" | "int" | "bigint" => Some(Self::Int64),
            "float64" | "float" | "double" => Some(Self::Float64),
            "utf8" | "string" | "text" => Some(Self::Utf8),
            "bool" | "boolean" => Some(Self::Bool),
            _ => None,
        }
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Int64 => "int64",
            Self::Float64 => "float64",
            Self::Utf8 => "utf8",
            Self::Bool => "bool",
        })
    }
}

/// A single cell value. Nulls are not representable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Value {
    #[serde(rename = "i")]
    Int(i64),
    #[serde(rename = "f")]
    Float(f64),
    #[serde(rename = "s")]
    Str(String),
    #[serde(rename = "b")]
    Bool(bool),
}

impl Value {
    pub fn column_type(&self) -> ColumnType {
        match self {
            Self::Int(_) => ColumnType::Int64,
            Self::Float(_) => ColumnType::Float64,
            Self::Str(_) => ColumnType::Utf8,
            Self::Bool(_) => ColumnType::Bool,
        }
    }

    /// Total order within one type; `None` across types.
    pub fn compare(&self, other: &Value) -> Option<Ordering> {
        match (self, other) {
            (Self::Int(a), Self::Int(b)) => Some(a.cmp(b)),
            (Self::Float(a), Self::Float(b)) => Some(a.total_cmp(b)),
            (Self::Str(a), Self::Str(b)) => Some(a.cmp(b)),
            (Self::Bool(a), Self::Bool(b)) => Some(a.cmp(b)),
            _ => None,
        }
    }

    /// Parses a literal for a column of type `ty`.
    pub fn parse_as(ty: ColumnType, s: &str) -> Option<Value> {
        match ty {
            ColumnType::Int64 => s.trim().parse().ok().map(Value::Int),
            ColumnType::Float64 => s.trim().parse::<f64>().ok().filter(|f| !f.is_nan()).map(Value::Float),
            ColumnType::Utf8 => Some(Value::Str(s.to_owned())),
            ColumnType::Bool => match s.trim().to_ascii_lowercase().as_str() {
                "true" | "t" | "1" => Some(Value::Bool(true)),
                "false" | "f" | "0" => Some(Value::Bool(false)),
                _ => None,
            },
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Self::Int(i) => Some(*i as f64),
            Self::Float(f) => Some(*f),
            _ => None,
        }
    }

    /// Canonical bytes used for hashing and sorting keys.
    pub fn canonical_bytes(&self, out: &mut Vec<u8>) {
        match self {
            Self::Int(i) => {
                out.push(1);
                out.extend_from_slice(&i.to_le_bytes());
            }
            Self::Float(f) => {
                out.push(2);
                out.extend_from_slice(&f.to_bits().to_le_bytes());
            }
            Self::Str(s) => {
                out.push(3);
                out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            Self::Bool(b) => {
                out.push(4);
                out.push(*b as u8);
            }
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        self.compare(other) == Some(Ordering::Equal)
    }
}

impl Eq for Value {}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        self.compare(other)
            .unwrap_or_else(|| (self.column_type() as u8).cmp(&(other.column_type() as u8)))
    }
}

impl std::hash::Hash for Value {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        let mut buf = Vec::new();
        self.canonical_bytes(&mut buf);
        buf.hash(state);
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Int(i) => write!(f, "{i}"),
            Self::Float(x) => write!(f, "{x}"),
            Self::Str(s) => f.write_str(s),
            Self::Bool(b) => write!(f, "{b}"),
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_owned())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

pub type Row = Vec<Value>;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Column>", into = "Vec<Column>")]
pub struct Schema {
    columns: Vec<Column>,
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> FileResult<Self> {
        if columns.is_empty() {
            return Err(FileError::InvalidSchema("at least one column is required".into()));
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if c.name.is_empty() {
                return Err(FileError::InvalidSchema("empty column name".into()));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(FileError::InvalidSchema(format!("duplicate column {:?}", c.name)));
            }
        }
        Ok(Self { columns })
    }

    /// Shorthand for tests and examples: `Schema::of(&[("C1", Utf8), ("C2", Int64)])`.
    pub fn of(cols: &[(&str, ColumnType)]) -> FileResult<Self> {
        Self::new(
            cols.iter()
                .map(|(n, t)| Column {
                    name: (*n).to_owned(),
                    ty: *t,
                })
                .collect(),
        )
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> FileResult<usize> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| FileError::UnknownColumn(name.to_owned()))
    }

    pub fn check_row(&self, row: &[Value]) -> FileResult<()> {
        if row.len() != self.columns.len() {
            return Err(FileError::SchemaMismatch(format!(
                "expected {} values, got {}",
                self.columns.len(),
                row.len()
            )));
        }
        for (v, c) in row.iter().zip(&self.columns) {
            if v.column_type() != c.ty {
                return Err(FileError::SchemaMismatch(format!(
                    "column {} expects {}, got {}",
                    c.name,
                    c.ty,
                    v.column_type()
                )));
            }
            if let Value::Float(f) = v {
                if f.is_nan() {
                    return Err(FileError::SchemaMismatch(format!("NaN in column {}", c.name)));
                }
            }
        }
        Ok(())
    }
}

impl TryFrom<Vec<Column>> for Schema {
    type Error = FileError;

    fn try_from(value: Vec<Column>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Schema> for Vec<Column> {
    fn from(value: Schema) -> Self {
        value.columns
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub min: Value,
    pub max: Value,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataFileMeta {
    pub path: ObjectPath,
    pub row_count: u64,
    pub stats: Vec<ColumnStats>,
    /// Begin timestamp of the transaction that wrote the file.
    pub created_txn_ts: u64,
    pub size_bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Footer {
    schema: Schema,
    row_count: u64,
    columns: Vec<(u64, u64)>,
    stats: Vec<ColumnStats>,
    created_txn_ts: u64,
}

/// Encodes rows as a columnar file. Returns the bytes and the resulting meta.
pub fn encode_data_file(
    path: &ObjectPath,
    schema: &Schema,
    rows: &[Row],
    created_txn_ts: u64,
) -> FileResult<(Vec<u8>, DataFileMeta)> {
    if rows.is_empty() {
        return Err(FileError::EmptyRows);
    }
    for row in rows {
        schema.check_row(row)?;
    }
    let mut out = Vec::with_capacity(64 + rows.len() * schema.len() * 8);
    out.extend_from_slice(DATA_MAGIC);
    let mut offsets = Vec::with_capacity(schema.len());
    let mut stats = Vec::with_capacity(schema.len());
    for (ci, col) in schema.columns().iter().enumerate() {
        let start = out.len() as u64;
        match col.ty {
            ColumnType::Int64 => {
                for r in rows {
                    if let Value::Int(i) = r[ci] {
                        out.extend_from_slice(&i.to_le_bytes());
                    }
                }
            }
            ColumnType::Float64 => {
                for r in rows {
                    if let Value::Float(f) = r[ci] {
                        out.extend_from_slice(&f.to_bits().to_le_bytes());
                    }
                }
            }
            ColumnType::Bool => {
                for r in rows {
                    if let Value::Bool(b) = r[ci] {
                        out.push(b as u8);
                    }
                }
            }
            ColumnType::Utf8 => {
                let mut acc = 0u32;
                out.extend_from_slice(&acc.to_le_bytes());
                for r in rows {
                    if let Value::Str(s) = &r[ci] {
                        acc += s.len() as u32;
                        out.extend_from_slice(&acc.to_le_bytes());
                    }
                }
                for r in rows {
                    if let Value::Str(s) = &r[ci] {
                        out.extend_from_slice(s.as_bytes());
                    }
                }
            }
        }
        offsets.push((start, out.len() as u64 - start));
        let min = rows.iter().map(|r| &r[ci]).min().expect("non-empty").clone();
        let max = rows.iter().map(|r| &r[ci]).max().expect("non-empty").clone();
        stats.push(ColumnStats { min, max });
    }
    let footer = Footer {
        schema: schema.clone(),
        row_count: rows.len() as u64,
        columns: offsets,
        stats: stats.clone(),
        created_txn_ts,
    };
    let footer_bytes = serde_json::to_vec(&footer).expect("footer serializes");
    out.extend_from_slice(&footer_bytes);
    out.extend_from_slice(&(footer_bytes.len() as u32).to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out.extend_from_slice(DATA_MAGIC);
    let meta = DataFileMeta {
        path: path.clone(),
        row_count: rows.len() as u64,
        stats,
        created_txn_ts,
        size_bytes: out.len() as u64,
    };
    Ok((out, meta))
}

/// A fully decoded data file.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedFile {
    pub schema: Schema,
    pub rows: Vec<Row>,
    pub created_txn_ts: u64,
}

pub fn decode_data_file(path: &ObjectPath, bytes: &[u8]) -> FileResult<DecodedFile> {
    let corrupt = |reason: &str| FileError::Corrupt {
        path: path.to_string(),
        reason: reason.to_owned(),
    };
    let n = bytes.len();
    if n < 8 + 4 + 4 + 8 || &bytes[..8] != DATA_MAGIC || &bytes[n - 8..] != DATA_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let crc = u32::from_le_bytes(bytes[n - 12..n - 8].try_into().unwrap());
    if crc32fast::hash(&bytes[..n - 12]) != crc {
        return Err(corrupt("checksum mismatch"));
    }
    let footer_len = u32::from_le_bytes(bytes[n - 16..n - 12].try_into().unwrap()) as usize;
    let footer_start = (n - 16).checked_sub(footer_len).ok_or_else(|| corrupt("footer length"))?;
    let footer: Footer =
        serde_json::from_slice(&bytes[footer_start..n - 16]).map_err(|e| corrupt(&e.to_string()))?;
    let rows_n = footer.row_count as usize;
    if footer.columns.len() != footer.schema.len() {
        return Err(corrupt("column count"));
    }
    let mut columns: Vec<Vec<Value>> = Vec::with_capacity(footer.schema.len());
    for (col, &(off, len)) in footer.schema.columns().iter().zip(&footer.columns) {
        let (off, len) = (off as usize, len as usize);
        let block = bytes
            .get(off..off + len)
            .filter(|_| off + len <= footer_start)
            .ok_or_else(|| corrupt("column range"))?;
        columns.push(decode_column(col.ty, block, rows_n).ok_or_else(|| corrupt("column block"))?);
    }
    let mut rows = vec![Vec::with_capacity(columns.len()); rows_n];
    for col in columns {
        for (row, v) in rows.iter_mut().zip(col) {
            row.push(v);
        }
    }
    Ok(DecodedFile {
        schema: footer.schema,
        rows,
        created_txn_ts: footer.created_txn_ts,
    })
}

fn decode_column(ty: ColumnType, block: &[u8], rows: usize) -> Option<Vec<Value>> {
    let word = |i: usize| -> Option<[u8; 8]> { block.get(i * 8..i * 8 + 8)?.try_into().ok() };
    match ty {
        ColumnType::Int64 => {
            (block.len() == rows * 8).then_some(())?;
            (0..rows).map(|i| Some(Value::Int(i64::from_le_bytes(word(i)?)))).collect()
        }
        ColumnType::Float64 => {
            (block.len() == rows * 8).then_some(())?;
            (0..rows)
                .map(|i| Some(Value::Float(f64::from_bits(u64::from_le_bytes(word(i)?)))))
                .collect()
        }
        ColumnType::Bool => {
            (block.len() == rows).then_some(())?;
            block.iter().map(|b| Some(Value::Bool(*b != 0))).collect()
        }
        ColumnType::Utf8 => {
            let offs_len = (rows + 1) * 4;
            let offs: Vec<usize> = (0..=rows)
                .map(|i| Some(u32::from_le_bytes(block.get(i * 4..i * 4 + 4)?.try_into().ok()?) as usize))
                .collect::<Option<_>>()?;
            let data = block.get(offs_len..)?;
            (offs[rows] == data.len()).then_some(())?;
            offs.windows(2)
                .map(|w| {
                    let s = std::str::from_utf8(data.get(w[0]..w[1])?).ok()?;
                    Some(Value::Str(s.to_owned()))
                })
                .collect()
        }
    }
}

/// Writes `rows` to a new immutable object at `path`.
pub fn write_data_file(
    store: &dyn ObjectStore,
    path: &ObjectPath,
    schema: &Schema,
    rows: &[Row],
    created_txn_ts: u64,
) -> FileResult<DataFileMeta> {
    let (bytes, meta) = encode_data_file(path, schema, rows, created_txn_ts)?;
    store.put_object(path, &bytes)?;
    Ok(meta)
}

/// Reads a data file, drops rows masked by `dv` and keeps only `projection`
/// (all columns when `None`), preserving stored order.
pub fn read_data_file(
    store: &dyn ObjectStore,
    path: &ObjectPath,
    projection: Option<&[String]>,
    dv: Option<&DeleteVector>,
) -> FileResult<Vec<Row>> {
    let decoded = decode_data_file(path, &store.get_object(path)?)?;
    let indices = match projection {
        None => None,
        Some(names) => Some(
            names
                .iter()
                .map(|n| decoded.schema.index_of(n))
                .collect::<FileResult<Vec<_>>>()?,
        ),
    };
    if let Some(dv) = dv {
        if dv.row_count() != decoded.rows.len() as u64 {
            return Err(FileError::Corrupt {
                path: path.to_string(),
                reason: format!(
                    "delete vector sized for {} rows, file has {}",
                    dv.row_count(),
                    decoded.rows.len()
                ),
            });
        }
    }
    Ok(decoded
        .rows
        .into_iter()
        .enumerate()
        .filter(|(i, _)| dv.map_or(true, |dv| !dv.contains(*i as u64)))
        .map(|(_, row)| match &indices {
            None => row,
            Some(idx) => idx.iter().map(|&i| row[i].clone()).collect(),
        })
        .collect())
}

/// Deleted row ordinals of one data file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeleteVector {
    target: ObjectPath,
    row_count: u64,
    ordinals: BTreeSet<u64>,
}

impl DeleteVector {
    pub fn new(target: ObjectPath, row_count: u64, ordinals: impl IntoIterator<Item = u64>) -> FileResult<Self> {
        let ordinals: BTreeSet<u64> = ordinals.into_iter().collect();
        if ordinals.is_empty() {
            return Err(FileError::EmptyDeleteVector);
        }
        if let Some(&max) = ordinals.iter().next_back() {
            if max >= row_count {
                return Err(FileError::OrdinalOutOfRange {
                    ordinal: max,
                    rows: row_count,
                });
            }
        }
        Ok(Self {
            target,
            row_count,
            ordinals,
        })
    }

    pub fn target(&self) -> &ObjectPath {
        &self.target
    }

    pub fn row_count(&self) -> u64 {
        self.row_count
    }

    pub fn len(&self) -> usize {
        self.ordinals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordinals.is_empty()
    }

    pub fn contains(&self, ordinal: u64) -> bool {
        self.ordinals.contains(&ordinal)
    }

    pub fn ordinals(&self) -> &BTreeSet<u64> {
        &self.ordinals
    }

    /// True when every row of the target is masked.
    pub fn covers_all(&self) -> bool {
        self.ordinals.len() as u64 == self.row_count
    }

    pub fn deleted_fraction(&self) -> f64 {
        self.ordinals.len() as f64 / self.row_count as f64
    }
}

/// Union of two delete vectors over the same file.
pub fn merge_delete_vectors(older: &DeleteVector, newer: &DeleteVector) -> FileResult<DeleteVector> {
    if older.target != newer.target || older.row_count != newer.row_count {
        return Err(FileError::TargetMismatch(older.target.clone(), newer.target.clone()));
    }
    Ok(DeleteVector {
        target: older.target.clone(),
        row_count: older.row_count,
        ordinals: older.ordinals.union(&newer.ordinals).copied().collect(),
    })
}

/// A persisted delete vector: where it lives plus its content.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeleteVectorFile {
    pub path: ObjectPath,
    pub size_bytes: u64,
    pub vector: DeleteVector,
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn get_varint(bytes: &[u8], pos: &mut usize) -> Option<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let b = *bytes.get(*pos)?;
        *pos += 1;
        v |= u64::from(b & 0x7f) << shift;
        if b & 0x80 == 0 {
            return Some(v);
        }
    }
    None
}

pub fn encode_delete_vector(dv: &DeleteVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + dv.len() * 2);
    out.extend_from_slice(DV_MAGIC);
    put_varint(&mut out, dv.row_count);
    let target = dv.target.as_str().as_bytes();
    put_varint(&mut out, target.len() as u64);
    out.extend_from_slice(target);
    put_varint(&mut out, dv.ordinals.len() as u64);
    let mut prev = 0u64;
    for (i, &o) in dv.ordinals.iter().enumerate() {
        put_varint(&mut out, if i == 0 { o } else { o - prev });
        prev = o;
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_delete_vector(path: &ObjectPath, bytes: &[u8]) -> FileResult<DeleteVector> {
    let corrupt = |reason: &str| FileError::Corrupt {
        path: path.to_string(),
        reason: reason.to_owned(),
    };
    if bytes.len() < DV_MAGIC.len() + 4 || &bytes[..8] != DV_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let body = &bytes[..bytes.len() - 4];
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return Err(corrupt("checksum mismatch"));
    }
    let mut pos = 8;
    let truncated = || corrupt("truncated");
    let row_count = get_varint(body, &mut pos).ok_or_else(truncated)?;
    let tlen = get_varint(body, &mut pos).ok_or_else(truncated)? as usize;
    let target = body.get(pos..pos + tlen).ok_or_else(truncated)?;
    pos += tlen;
    let target = std::str::from_utf8(target)
        .ok()
        .and_then(|s| ObjectPath::parse(s).ok())
        .ok_or_else(|| corrupt("target path"))?;
    let count = get_varint(body, &mut pos).ok_or_else(truncated)?;
    let mut ordinals = BTreeSet::new();
    let mut prev = 0u64;
    for i in 0..count {
        let d = get_varint(body, &mut pos).ok_or_else(truncated)?;
        prev = if i == 0 { d } else { prev + d };
        ordinals.insert(prev);
    }
    if pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    DeleteVector::new(target, row_count, ordinals)
}

pub fn write_delete_vector(
    store: &dyn ObjectStore,
    dv: &DeleteVector,
    path: &ObjectPath,
) -> FileResult<DeleteVectorFile> {
    let bytes = encode_delete_vector(dv);
    store.put_object(path, &bytes)?;
    Ok(DeleteVectorFile {
        path: path.clone(),
        size_bytes: bytes.len() as u64,
        vector: dv.clone(),
    })
}

pub fn read_delete_vector(store: &dyn ObjectStore, path: &ObjectPath) -> FileResult<DeleteVector> {
    decode_delete_vector(path, &store.get_object(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::object_store::MemoryStore;
    use proptest::prelude::*;
    use ColumnType::*;

    fn p(s: &str) -> ObjectPath {
        ObjectPath::parse(s).unwrap()
    }

    fn t1_schema() -> Schema {
        Schema::of(&[("C1", Utf8), ("C2", Int64)]).unwrap()
    }

    fn abc() -> Vec<Row> {
        vec![
            vec!["A".into(), 1.into()],
            vec!["B".into(), 2.into()],
            vec!["C".into(), 3.into()],
        ]
    }

    #[test]
    fn three_row_file_meta() {
        let store = MemoryStore::new();
        let meta = write_data_file(&store, &p("ws/1/data/1.parquet"), &t1_schema(), &abc(), 0).unwrap();
        assert_eq!(meta.row_count, 3);
        assert_eq!(meta.stats[1].min, Value::Int(1));
        assert_eq!(meta.stats[1].max, Value::Int(3));
        assert_eq!(meta.stats[0].min, Value::from("A"));
        assert_eq!(meta.size_bytes, store.get_object(&meta.path).unwrap().len() as u64);
    }

    #[test]
    fn empty_rows_rejected() {
        let store = MemoryStore::new();
        let err = write_data_file(&store, &p("ws/1/data/x.col"), &t1_schema(), &[], 0).unwrap_err();
        assert!(matches!(err, FileError::EmptyRows));
    }

    #[test]
    fn schema_mismatch_and_duplicate_write() {
        let store = MemoryStore::new();
        let bad = vec![vec![Value::Int(1), Value::Int(2)]];
        assert!(matches!(
            write_data_file(&store, &p("ws/1/data/x.col"), &t1_schema(), &bad, 0),
            Err(FileError::SchemaMismatch(_))
        ));
        write_data_file(&store, &p("ws/1/data/x.col"), &t1_schema(), &abc(), 0).unwrap();
        assert!(matches!(
            write_data_file(&store, &p("ws/1/data/x.col"), &t1_schema(), &abc(), 0),
            Err(FileError::Store(StoreError::AlreadyExists(_)))
        ));
    }

    #[test]
    fn schema_validation() {
        assert!(Schema::of(&[]).is_err());
        assert!(Schema::of(&[("a", Int64), ("a", Utf8)]).is_err());
        assert!(Schema::of(&[("", Int64)]).is_err());
    }

    #[test]
    fn merge_on_read_masks_rows() {
        let store = MemoryStore::new();
        let path = p("ws/1/data/1.parquet");
        write_data_file(&store, &path, &t1_schema(), &abc(), 0).unwrap();
        let dv = DeleteVector::new(path.clone(), 3, [0]).unwrap();
        let rows = read_data_file(&store, &path, None, Some(&dv)).unwrap();
        assert_eq!(rows, abc()[1..].to_vec());
        assert_eq!(read_data_file(&store, &path, None, None).unwrap(), abc());
        let all = DeleteVector::new(path.clone(), 3, [0, 1, 2]).unwrap();
        assert!(read_data_file(&store, &path, None, Some(&all)).unwrap().is_empty());
        let projected = read_data_file(&store, &path, Some(&["C2".to_owned()]), None).unwrap();
        assert_eq!(projected, vec![vec![Value::Int(1)], vec![Value::Int(2)], vec![Value::Int(3)]]);
        assert!(matches!(
            read_data_file(&store, &path, Some(&["nope".to_owned()]), None),
            Err(FileError::UnknownColumn(_))
        ));
    }

    #[test]
    fn corrupt_file_detected() {
        let path = p("ws/1/data/1.col");
        let (mut bytes, _) = encode_data_file(&path, &t1_schema(), &abc(), 0).unwrap();
        bytes[10] ^= 0xff;
        assert!(matches!(decode_data_file(&path, &bytes), Err(FileError::Corrupt { .. })));
        assert!(matches!(decode_data_file(&path, &bytes[..5]), Err(FileError::Corrupt { .. })));
        let store = MemoryStore::new();
        assert!(matches!(
            read_data_file(&store, &path, None, None),
            Err(FileError::Store(StoreError::NotFound(_)))
        ));
    }

    #[test]
    fn delete_vector_files() {
        let store = MemoryStore::new();
        let target = p("ws/1/data/1.parquet");
        let dv = DeleteVector::new(target.clone(), 3, [0]).unwrap();
        let f = write_delete_vector(&store, &dv, &p("ws/1/dv/1DV.parquet")).unwrap();
        assert_eq!(read_delete_vector(&store, &f.path).unwrap(), dv);
        assert!(matches!(
            DeleteVector::new(target.clone(), 3, []),
            Err(FileError::EmptyDeleteVector)
        ));
        assert!(matches!(
            DeleteVector::new(target.clone(), 3, [3]),
            Err(FileError::OrdinalOutOfRange { .. })
        ));
        let full = DeleteVector::new(target.clone(), 1000, 0..1000).unwrap();
        let f = write_delete_vector(&store, &full, &p("ws/1/dv/full.dv")).unwrap();
        assert_eq!(read_delete_vector(&store, &f.path).unwrap(), full);
        assert!(full.covers_all());
        let mut bytes = encode_delete_vector(&dv);
        let n = bytes.len();
        bytes[n - 5] ^= 1;
        assert!(decode_delete_vector(&target, &bytes).is_err());
    }

    #[test]
    fn merge_examples() {
        let t = p("ws/1/data/f.col");
        let a = DeleteVector::new(t.clone(), 5, [0]).unwrap();
        let b = DeleteVector::new(t.clone(), 5, [2]).unwrap();
        let merged = merge_delete_vectors(&a, &b).unwrap();
        let expected: BTreeSet<u64> = a.ordinals().union(b.ordinals()).copied().collect();
        assert_eq!(merged.ordinals(), &expected);
        assert_eq!(merge_delete_vectors(&a, &a).unwrap(), a);
        let other = DeleteVector::new(p("ws/1/data/g.col"), 5, [1]).unwrap();
        assert!(matches!(merge_delete_vectors(&a, &other), Err(FileError::TargetMismatch(..))));
    }

    fn value_for(ty: ColumnType) -> BoxedStrategy<Value> {
        match ty {
            Int64 => any::<i64>().prop_map(Value::Int).boxed(),
            Float64 => (-1e12f64..1e12).prop_map(Value::Float).boxed(),
            Utf8 => "[a-zA-Z0-9 ]{0,12}".prop_map(Value::Str).boxed(),
            Bool => any::<bool>().prop_map(Value::Bool).boxed(),
        }
    }

    fn schema_and_rows() -> impl Strategy<Value = (Schema, Vec<Row>)> {
        prop::collection::vec(prop_oneof![Just(Int64), Just(Float64), Just(Utf8), Just(Bool)], 1..5)
            .prop_flat_map(|types| {
                let schema = Schema::new(
                    types
                        .iter()
                        .enumerate()
                        .map(|(i, t)| Column {
                            name: format!("c{i}"),
                            ty: *t,
                        })
                        .collect(),
                )
                .unwrap();
                let row = types.iter().map(|t| value_for(*t)).collect::<Vec<_>>();
                (Just(schema), prop::collection::vec(row, 1..60))
            })
    }

    proptest! {
        #[test]
        fn round_trip_and_stats((schema, rows) in schema_and_rows(), mask in prop::collection::btree_set(0u64..60, 0..20)) {
            let store = MemoryStore::new();
            let path = p("ws/1/data/r.col");
            let meta = write_data_file(&store, &path, &schema, &rows, 7).unwrap();
            prop_assert_eq!(meta.row_count, rows.len() as u64);
            prop_assert_eq!(&read_data_file(&store, &path, None, None).unwrap(), &rows);
            for row in &rows {
                for (v, s) in row.iter().zip(&meta.stats) {
                    prop_assert!(s.min <= *v && *v <= s.max);
                }
            }
            let mask: BTreeSet<u64> = mask.into_iter().filter(|o| *o < rows.len() as u64).collect();
            if !mask.is_empty() {
                let dv = DeleteVector::new(path.clone(), rows.len() as u64, mask.iter().copied()).unwrap();
                let read = read_data_file(&store, &path, None, Some(&dv)).unwrap();
                prop_assert_eq!(read.len() as u64, meta.row_count - dv.len() as u64);
                prop_assert_eq!(decode_delete_vector(&path, &encode_delete_vector(&dv)).unwrap(), dv);
            }
        }

        #[test]
        fn merge_is_a_set_union(a in prop::collection::btree_set(0u64..64, 1..10),
                                b in prop::collection::btree_set(0u64..64, 1..10),
                                c in prop::collection::btree_set(0u64..64, 1..10)) {
            let t = p("ws/1/data/f.col");
            let (a, b, c) = (
                DeleteVector::new(t.clone(), 64, a).unwrap(),
                DeleteVector::new(t.clone(), 64, b).unwrap(),
                DeleteVector::new(t.clone(), 64, c).unwrap(),
            );
            prop_assert_eq!(merge_delete_vectors(&a, &b).unwrap(), merge_delete_vectors(&b, &a).unwrap());
            prop_assert_eq!(
                merge_delete_vectors(&merge_delete_vectors(&a, &b).unwrap(), &c).unwrap(),
                merge_delete_vectors(&a, &merge_delete_vectors(&b, &c).unwrap()).unwrap()
            );
            prop_assert_eq!(merge_delete_vectors(&a, &a).unwrap(), a);
        }
    }

    #[test]
    fn ten_thousand_rows_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let schema = Schema::of(&[("k", Int64), ("v", Float64), ("s", Utf8), ("b", Bool)]).unwrap();
        let rows: Vec<Row> = (0..10_000)
            .map(|i| {
                vec![
                    Value::Int(rng.gen()),
                    Value::Float(rng.gen_range(-1.0..1.0)),
                    Value::Str(format!("row-{i}-{}", rng.gen::<u16>())),
                    Value::Bool(rng.gen()),
                ]
            })
            .collect();
        let store = MemoryStore::new();
        let path = p("ws/1/data/big.col");
        write_data_file(&store, &path, &schema, &rows, 0).unwrap();
        assert_eq!(read_data_file(&store, &path, None, None).unwrap(), rows);
    }
}
