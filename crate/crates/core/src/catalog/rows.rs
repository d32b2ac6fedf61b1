use std::fmt;
use std::ops::Bound;

use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::datafile::Schema;
use crate::manifest::{SequenceId, TableId};
use crate::object_store::ObjectPath;

/// What a WriteSets row guards: a whole table or a single data file.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteTarget {
    WholeTable,
    File(ObjectPath),
}

impl fmt::Display for WriteTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::WholeTable => f.write_str("*"),
            Self::File(p) => write!(f, "{p}"),
        }
    }
}

/// Primary key of a catalog row. Variant order groups rows by catalog table.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Key {
    Counter(String),
    Table(TableId),
    TableName(String),
    Manifest { table: TableId, file: String },
    WriteSet { table: TableId, target: WriteTarget },
    Checkpoint { table: TableId, upto: SequenceId },
}

impl Key {
    pub fn manifest(table: TableId, file: &ObjectPath) -> Self {
        Self::Manifest {
            table,
            file: file.as_str().to_owned(),
        }
    }

    /// Reads of checkpoint rows are never validated: checkpoints do not
    /// change what a table contains.
    pub(crate) fn validated_on_read(&self) -> bool {
        !matches!(self, Key::Checkpoint { .. } | Key::Counter(_))
    }
}

/// A contiguous key range corresponding to one logical scan.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyRange {
    Tables,
    Manifests(TableId),
    AllManifests,
    WriteSets(TableId),
    Checkpoints(TableId),
}

impl KeyRange {
    pub fn bounds(&self) -> (Bound<Key>, Bound<Key>) {
        use Bound::*;
        match self {
            KeyRange::Tables => (Included(Key::Table(0)), Excluded(Key::TableName(String::new()))),
            KeyRange::Manifests(t) => (
                Included(Key::Manifest {
                    table: *t,
                    file: String::new(),
                }),
                Excluded(Key::Manifest {
                    table: t + 1,
                    file: String::new(),
                }),
            ),
            KeyRange::AllManifests => (
                Included(Key::Manifest {
                    table: 0,
                    file: String::new(),
                }),
                Excluded(Key::WriteSet {
                    table: 0,
                    target: WriteTarget::WholeTable,
                }),
            ),
            KeyRange::WriteSets(t) => (
                Included(Key::WriteSet {
                    table: *t,
                    target: WriteTarget::WholeTable,
                }),
                Excluded(Key::WriteSet {
                    table: t + 1,
                    target: WriteTarget::WholeTable,
                }),
            ),
            KeyRange::Checkpoints(t) => (
                Included(Key::Checkpoint { table: *t, upto: 0 }),
                Excluded(Key::Checkpoint { table: t + 1, upto: 0 }),
            ),
        }
    }

    pub fn contains(&self, key: &Key) -> bool {
        let (lo, hi) = self.bounds();
        let above = match &lo {
            Bound::Included(k) => key >= k,
            Bound::Excluded(k) => key > k,
            Bound::Unbounded => true,
        };
        let below = match &hi {
            Bound::Included(k) => key <= k,
            Bound::Excluded(k) => key < k,
            Bound::Unbounded => true,
        };
        above && below
    }
}

/// Definition of a user table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub id: TableId,
    pub name: String,
    pub schema: Schema,
    /// Number of hash buckets rows are spread over.
    pub distribution_count: u32,
    /// Columns hashed to pick a bucket; empty means the first column.
    #[serde(default)]
    pub distribution_key: Vec<String>,
    /// Columns rows are sorted by inside a bucket.
    #[serde(default)]
    pub partition_key: Vec<String>,
}

/// One committed transaction manifest of a table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestsRow {
    pub table_id: TableId,
    pub manifest_file: ObjectPath,
    /// Zero until assigned at commit.
    pub sequence_id: SequenceId,
    pub transaction_id: u64,
    /// Zero until assigned at commit, unless carried over by a clone.
    pub commit_wallclock: Millis,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteSetsRow {
    pub table_id: TableId,
    pub target: WriteTarget,
    pub updated: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub table_id: TableId,
    pub upto_sequence: SequenceId,
    pub path: ObjectPath,
    pub created_wallclock: Millis,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Row {
    Counter(u64),
    Table(TableDef),
    TableName(TableId),
    Manifest(ManifestsRow),
    WriteSet(WriteSetsRow),
    Checkpoint(CheckpointRow),
}

impl Row {
    pub fn as_manifest(&self) -> Option<&ManifestsRow> {
        match self {
            Row::Manifest(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_table(&self) -> Option<&TableDef> {
        match self {
            Row::Table(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_checkpoint(&self) -> Option<&CheckpointRow> {
        match self {
            Row::Checkpoint(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_write_set(&self) -> Option<&WriteSetsRow> {
        match self {
            Row::WriteSet(w) => Some(w),
            _ => None,
        }
    }
}
