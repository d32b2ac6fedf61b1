//! Transaction manifests, checkpoints and table-state reconstruction.
//!
//! A committed write transaction leaves one manifest per modified table. The
//! state of a table at sequence `s` is obtained by folding [`apply`] over the
//! table's manifests with sequence `<= s`, optionally starting from a
//! checkpoint that already materializes a prefix.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datafile::{merge_delete_vectors, DataFileMeta, DeleteVectorFile, encode_delete_vector};
use crate::object_store::{BlockId, ObjectPath};

pub type TableId = u64;
pub type SequenceId = u64;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("corrupt manifest: {0}")]
    Corrupt(String),
    #[error("remove of {0} which is not live")]
    DanglingRemove(ObjectPath),
    #[error("file {0} added twice")]
    DuplicateAdd(ObjectPath),
    #[error("delete vector targets {0} which is not live")]
    DanglingDeleteVector(ObjectPath),
    #[error("missing manifest for visible sequence {0}")]
    SequenceGap(SequenceId),
    #[error("manifest sequences must increase and follow the checkpoint (got {got} after {after})")]
    OutOfOrder { got: SequenceId, after: SequenceId },
    #[error("checkpoint belongs to table {found}, expected {expected}")]
    WrongTable { expected: TableId, found: TableId },
}

pub type ManifestResult<T> = Result<T, ManifestError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ManifestAction {
    AddDataFile { meta: DataFileMeta },
    RemoveDataFile { path: ObjectPath },
    AddDeleteVector { dv: DeleteVectorFile },
    RemoveDeleteVector { path: ObjectPath, target: ObjectPath },
}

impl ManifestAction {
    /// The object this action adds or removes.
    pub fn file(&self) -> &ObjectPath {
        match self {
            Self::AddDataFile { meta } => &meta.path,
            Self::RemoveDataFile { path } => path,
            Self::AddDeleteVector { dv } => &dv.path,
            Self::RemoveDeleteVector { path, .. } => path,
        }
    }

    /// The data file whose visible rows this action changes, for actions that
    /// modify pre-existing data (everything except adding a data file).
    pub fn modified_data_file(&self) -> Option<&ObjectPath> {
        match self {
            Self::AddDataFile { .. } => None,
            Self::RemoveDataFile { path } => Some(path),
            Self::AddDeleteVector { dv } => Some(dv.vector.target()),
            Self::RemoveDeleteVector { target, .. } => Some(target),
        }
    }
}

/// Serializes actions as one JSON record per line. Any concatenation of
/// encoded blocks is itself a valid encoding.
pub fn encode_action_block(actions: &[ManifestAction]) -> Vec<u8> {
    let mut out = Vec::new();
    for a in actions {
        serde_json::to_writer(&mut out, a).expect("actions serialize");
        out.push(b'\n');
    }
    out
}

pub fn decode_actions(bytes: &[u8]) -> ManifestResult<Vec<ManifestAction>> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    if bytes.last() != Some(&b'\n') {
        return Err(ManifestError::Corrupt("truncated record".into()));
    }
    bytes[..bytes.len() - 1]
        .split(|b| *b == b'\n')
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_slice(line).map_err(|e| ManifestError::Corrupt(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// All changes of one transaction to one table.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransactionManifest {
    pub table: TableId,
    pub actions: Vec<ManifestAction>,
    /// Block list the manifest object was last committed with.
    pub blocks: Vec<BlockId>,
}

impl TransactionManifest {
    pub fn new(table: TableId) -> Self {
        Self {
            table,
            ..Default::default()
        }
    }

    pub fn decode(table: TableId, bytes: &[u8]) -> ManifestResult<Self> {
        Ok(Self {
            table,
            actions: decode_actions(bytes)?,
            blocks: Vec::new(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_action_block(&self.actions)
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// True when the manifest touches pre-existing data (update or delete),
    /// as opposed to only appending new files.
    pub fn modifies_existing(&self) -> bool {
        self.actions.iter().any(|a| a.modified_data_file().is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveFile {
    pub meta: DataFileMeta,
    pub dv: Option<DeleteVectorFile>,
}

impl LiveFile {
    pub fn deleted_rows(&self) -> u64 {
        self.dv.as_ref().map_or(0, |d| d.vector.len() as u64)
    }

    pub fn live_rows(&self) -> u64 {
        self.meta.row_count - self.deleted_rows()
    }
}

/// Materialized snapshot of one table.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableState {
    pub live: BTreeMap<ObjectPath, Arc<LiveFile>>,
    /// Logically removed data and delete-vector files with the removing sequence.
    pub removed: BTreeMap<ObjectPath, SequenceId>,
    pub as_of_sequence: SequenceId,
}

impl TableState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn live_rows(&self) -> u64 {
        self.live.values().map(|f| f.live_rows()).sum()
    }

    /// Every object (data file or delete vector) the state references.
    pub fn referenced_files(&self) -> impl Iterator<Item = &ObjectPath> {
        self.live
            .values()
            .flat_map(|f| std::iter::once(&f.meta.path).chain(f.dv.as_ref().map(|d| &d.path)))
    }

    pub fn apply_in_place(&mut self, manifest: &TransactionManifest, seq: SequenceId) -> ManifestResult<()> {
        for action in &manifest.actions {
            match action {
                ManifestAction::AddDataFile { meta } => {
                    if self.live.contains_key(&meta.path) || self.removed.contains_key(&meta.path) {
                        return Err(ManifestError::DuplicateAdd(meta.path.clone()));
                    }
                    self.live.insert(
                        meta.path.clone(),
                        Arc::new(LiveFile {
                            meta: meta.clone(),
                            dv: None,
                        }),
                    );
                }
                ManifestAction::RemoveDataFile { path } => {
                    let file = self
                        .live
                        .remove(path)
                        .ok_or_else(|| ManifestError::DanglingRemove(path.clone()))?;
                    if let Some(dv) = &file.dv {
                        self.removed.insert(dv.path.clone(), seq);
                    }
                    self.removed.insert(path.clone(), seq);
                }
                ManifestAction::AddDeleteVector { dv } => {
                    let target = dv.vector.target();
                    let file = self
                        .live
                        .get_mut(target)
                        .ok_or_else(|| ManifestError::DanglingDeleteVector(target.clone()))?;
                    let file = Arc::make_mut(file);
                    if let Some(old) = file.dv.replace(dv.clone()) {
                        self.removed.insert(old.path, seq);
                    }
                }
                ManifestAction::RemoveDeleteVector { path, target } => {
                    let file = self
                        .live
                        .get_mut(target)
                        .filter(|f| f.dv.as_ref().map(|d| &d.path) == Some(path))
                        .ok_or_else(|| ManifestError::DanglingRemove(path.clone()))?;
                    Arc::make_mut(file).dv = None;
                    self.removed.insert(path.clone(), seq);
                }
            }
        }
        self.as_of_sequence = seq;
        Ok(())
    }
}

/// Applies one committed manifest at sequence `seq`.
pub fn apply(state: &TableState, manifest: &TransactionManifest, seq: SequenceId) -> ManifestResult<TableState> {
    let mut next = state.clone();
    next.apply_in_place(manifest, seq)?;
    Ok(next)
}

/// A materialized state persisted as a single object.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub table: TableId,
    pub upto_sequence: SequenceId,
    pub created_txn_ts: u64,
    pub state: TableState,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn decode(bytes: &[u8]) -> ManifestResult<Self> {
        serde_json::from_slice(bytes).map_err(|e| ManifestError::Corrupt(format!("checkpoint: {e}")))
    }
}

/// Rebuilds a table state from an optional checkpoint and the manifests
/// that follow it.
///
/// `visible` lists the sequences the reader is entitled to see, in order;
/// each one above the checkpoint must have a manifest in `manifests`.
pub fn replay(
    checkpoint: Option<&Checkpoint>,
    visible: &[SequenceId],
    manifests: &[(SequenceId, TransactionManifest)],
) -> ManifestResult<TableState> {
    let mut state = checkpoint.map(|c| c.state.clone()).unwrap_or_default();
    let floor = checkpoint.map_or(0, |c| c.upto_sequence);
    if let Some(c) = checkpoint {
        if let Some((_, m)) = manifests.first() {
            if m.table != c.table {
                return Err(ManifestError::WrongTable {
                    expected: c.table,
                    found: m.table,
                });
            }
        }
    }
    let mut last = floor;
    for (seq, _) in manifests {
        if *seq <= last {
            return Err(ManifestError::OutOfOrder { got: *seq, after: last });
        }
        last = *seq;
    }
    let mut supplied = manifests.iter().peekable();
    for &seq in visible.iter().filter(|s| **s > floor) {
        match supplied.peek() {
            Some((s, m)) if *s == seq => {
                state.apply_in_place(m, seq)?;
                supplied.next();
            }
            _ => return Err(ManifestError::SequenceGap(seq)),
        }
    }
    Ok(state)
}

/// The committed state as seen by a transaction with uncommitted changes `own`.
pub fn overlay(committed: &TableState, own: &TransactionManifest) -> ManifestResult<TableState> {
    if own.is_empty() {
        return Ok(committed.clone());
    }
    let mut view = committed.clone();
    view.apply_in_place(own, committed.as_of_sequence)?;
    Ok(view)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reconciliation {
    pub manifest: TransactionManifest,
    /// Files written by this transaction that no surviving action references.
    pub orphaned: Vec<ObjectPath>,
    /// Merged delete vectors the caller must persist before committing the manifest.
    pub pending_delete_vectors: Vec<DeleteVectorFile>,
}

fn merged_dv_path(newer: &ObjectPath) -> ObjectPath {
    let name = newer.file_name();
    let stem = name.strip_suffix(".dv").unwrap_or(name);
    let parent = newer.parent().unwrap_or("");
    ObjectPath::parse(&format!("{parent}/{stem}.merged.dv")).expect("derived from a valid path")
}

/// Folds the actions of a later statement into the transaction manifest so
/// nothing made obsolete by a later statement survives.
///
/// A file added and later removed within the transaction disappears and is
/// reported as orphaned. Two delete vectors added for the same file are
/// merged into one.
pub fn reconcile(own: &TransactionManifest, new_actions: &[ManifestAction]) -> Reconciliation {
    let mut survivors: Vec<ManifestAction> = Vec::with_capacity(own.actions.len() + new_actions.len());
    let mut orphaned = Vec::new();
    let mut pending = Vec::new();

    for action in own.actions.iter().chain(new_actions) {
        match action {
            ManifestAction::AddDataFile { .. } => survivors.push(action.clone()),
            ManifestAction::RemoveDataFile { path } => {
                let mut added_here = false;
                survivors.retain(|a| match a {
                    ManifestAction::AddDataFile { meta } if &meta.path == path => {
                        added_here = true;
                        false
                    }
                    ManifestAction::AddDeleteVector { dv } if dv.vector.target() == path => {
                        orphaned.push(dv.path.clone());
                        false
                    }
                    _ => true,
                });
                if added_here {
                    survivors.retain(|a| !matches!(a, ManifestAction::RemoveDeleteVector { target, .. } if target == path));
                    orphaned.push(path.clone());
                } else {
                    survivors.push(action.clone());
                }
            }
            ManifestAction::AddDeleteVector { dv } => {
                let earlier = survivors.iter().position(
                    |a| matches!(a, ManifestAction::AddDeleteVector { dv: d } if d.vector.target() == dv.vector.target()),
                );
                match earlier {
                    Some(i) => {
                        let ManifestAction::AddDeleteVector { dv: prev } = &survivors[i] else {
                            unreachable!()
                        };
                        match merge_delete_vectors(&prev.vector, &dv.vector) {
                            Ok(vector) => {
                                let path = merged_dv_path(&dv.path);
                                let merged = DeleteVectorFile {
                                    size_bytes: encode_delete_vector(&vector).len() as u64,
                                    path,
                                    vector,
                                };
                                orphaned.push(prev.path.clone());
                                orphaned.push(dv.path.clone());
                                pending.retain(|p: &DeleteVectorFile| p.path != prev.path);
                                pending.push(merged.clone());
                                survivors[i] = ManifestAction::AddDeleteVector { dv: merged };
                            }
                            Err(_) => survivors.push(action.clone()),
                        }
                    }
                    None => survivors.push(action.clone()),
                }
            }
            ManifestAction::RemoveDeleteVector { path, .. } => {
                let before = survivors.len();
                survivors.retain(|a| !matches!(a, ManifestAction::AddDeleteVector { dv } if &dv.path == path));
                if survivors.len() < before {
                    orphaned.push(path.clone());
                    pending.retain(|p| &p.path != path);
                } else {
                    survivors.push(action.clone());
                }
            }
        }
    }

    pending.retain(|p| !orphaned.contains(&p.path));
    Reconciliation {
        manifest: TransactionManifest {
            table: own.table,
            actions: survivors,
            blocks: own.blocks.clone(),
        },
        orphaned,
        pending_delete_vectors: pending,
    }
}
