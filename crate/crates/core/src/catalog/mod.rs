//! Embedded multi-version row store for the logical metadata.
//!
//! Every key holds a chain of versions. A transaction reads the newest
//! version at or below its read version and buffers its own writes. Commits
//! serialize on one lock where write-write validation (and read validation in
//! serializable mode) runs, manifest sequence numbers are assigned and the
//! new versions are published together.

mod journal;
mod rows;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Millis};
use crate::manifest::{SequenceId, TableId};

pub use journal::{JournalRecord, JOURNAL_FILE};
pub use rows::{CheckpointRow, Key, KeyRange, ManifestsRow, Row, TableDef, WriteSetsRow, WriteTarget};

/// Position in the catalog's commit order.
pub type Version = u64;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("catalog transaction {0} is no longer active")]
    TxnClosed(u64),
    #[error("write-write conflict on {key}")]
    WriteConflict { key: String },
    #[error("serialization failure: {key} changed after it was read")]
    SerializationFailure { key: String },
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("catalog is not empty")]
    NotEmpty,
    #[error("journal: {0}")]
    Journal(String),
    #[error("corrupt catalog data: {0}")]
    Corrupt(String),
}

impl CatalogError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::WriteConflict { .. } | Self::SerializationFailure { .. })
    }
}

pub type CatalogResult<T> = Result<T, CatalogError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Isolation {
    #[default]
    Snapshot,
    ReadCommittedSnapshot,
    Serializable,
}

impl FromStr for Isolation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "si" | "snapshot" => Ok(Self::Snapshot),
            "rcsi" | "read_committed_snapshot" => Ok(Self::ReadCommittedSnapshot),
            "serializable" | "ser" => Ok(Self::Serializable),
            other => Err(format!("unknown isolation level {other:?}")),
        }
    }
}

impl fmt::Display for Isolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Snapshot => "si",
            Self::ReadCommittedSnapshot => "rcsi",
            Self::Serializable => "serializable",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxnStatus {
    Active,
    Committed,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum PendingOp {
    Put(Row),
    Delete,
    BumpWriteSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Pending {
    order: u64,
    /// Version the write was based on; a newer committed version conflicts.
    base: Version,
    op: PendingOp,
}

/// Everything needed to continue a catalog transaction in another process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogTxnState {
    pub id: u64,
    pub isolation: Isolation,
    pub begin_version: Version,
    pub read_version: Version,
    pub status: TxnStatus,
    writes: Vec<(Key, Pending)>,
    reads: Vec<Key>,
    scans: Vec<KeyRange>,
    next_order: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommitInfo {
    pub version: Version,
    /// Manifests rows as published, with sequence ids and wall clock filled in.
    pub manifests: Vec<ManifestsRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CatalogSnapshot {
    version: Version,
    next_sequence: SequenceId,
    rows: Vec<(Key, Row)>,
}

type Chain = Vec<(Version, Option<Row>)>;

#[derive(Debug, Default)]
struct Store {
    chains: BTreeMap<Key, Chain>,
    latest: Version,
    /// Last assigned manifest sequence id.
    sequence: SequenceId,
    reserved: u64,
}

impl Store {
    fn read_at(&self, key: &Key, version: Version) -> Option<&Row> {
        resolve(self.chains.get(key)?, version)
    }

    fn newest_version(&self, key: &Key) -> Version {
        self.chains.get(key).and_then(|c| c.last()).map_or(0, |(v, _)| *v)
    }

    fn apply(&mut self, record: &JournalRecord) {
        for (key, row) in &record.writes {
            self.chains.entry(key.clone()).or_default().push((record.version, row.clone()));
        }
        self.latest = self.latest.max(record.version);
        self.sequence = self.sequence.max(record.next_sequence);
        self.reserved = self.reserved.max(record.reserved);
    }
}

fn resolve(chain: &Chain, version: Version) -> Option<&Row> {
    chain
        .iter()
        .rev()
        .find(|(v, _)| *v <= version)
        .and_then(|(_, r)| r.as_ref())
}

#[derive(Debug, Default)]
struct Tickets {
    /// Shared counter for begin timestamps and commit versions.
    counter: u64,
    /// Highest timestamp covered by a journaled reservation.
    reserved: u64,
    active: BTreeSet<u64>,
}

const RESERVE_BLOCK: u64 = 1024;

#[derive(Debug)]
struct Inner {
    store: RwLock<Store>,
    tickets: Mutex<Tickets>,
    journal: Mutex<Option<journal::Journal>>,
    clock: Arc<dyn Clock>,
}

/// Handle to a catalog; cheap to clone.
#[derive(Clone, Debug)]
pub struct Catalog {
    inner: Arc<Inner>,
}

impl Catalog {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self::with(Store::default(), None, clock)
    }

    /// Opens a durable catalog whose journal lives in `dir`.
    pub fn open(dir: &Path, clock: Arc<dyn Clock>) -> CatalogResult<Self> {
        let (journal, records) = journal::Journal::open(dir)?;
        let mut store = Store::default();
        for r in &records {
            store.apply(r);
        }
        Ok(Self::with(store, Some(journal), clock))
    }

    fn with(store: Store, journal: Option<journal::Journal>, clock: Arc<dyn Clock>) -> Self {
        let counter = store.latest.max(store.reserved);
        let reserved = if journal.is_some() { counter } else { u64::MAX };
        Self {
            inner: Arc::new(Inner {
                store: RwLock::new(store),
                tickets: Mutex::new(Tickets {
                    counter,
                    reserved,
                    active: BTreeSet::new(),
                }),
                journal: Mutex::new(journal),
                clock,
            }),
        }
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.inner.clock
    }

    pub fn now_ms(&self) -> Millis {
        self.inner.clock.now_ms()
    }

    pub fn latest_version(&self) -> Version {
        self.inner.store.read().latest
    }

    pub fn begin(&self, isolation: Isolation) -> CatalogTxn {
        let (id, reserve) = {
            let mut t = self.inner.tickets.lock();
            t.counter += 1;
            let id = t.counter;
            t.active.insert(id);
            let reserve = (id > t.reserved).then(|| id + RESERVE_BLOCK);
            if let Some(r) = reserve {
                t.reserved = r;
            }
            (id, reserve)
        };
        if let Some(r) = reserve {
            self.reserve(r);
        }
        let begin_version = self.latest_version();
        CatalogTxn {
            catalog: self.clone(),
            state: CatalogTxnState {
                id,
                isolation,
                begin_version,
                read_version: begin_version,
                status: TxnStatus::Active,
                writes: Vec::new(),
                reads: Vec::new(),
                scans: Vec::new(),
                next_order: 0,
            },
            writes: BTreeMap::new(),
            reads: BTreeSet::new(),
        }
    }

    /// Journals that timestamps up to `upto` may be handed out, so a
    /// reopened catalog never reuses one.
    fn reserve(&self, upto: u64) {
        let mut journal = self.inner.journal.lock();
        let Some(j) = journal.as_mut() else {
            return;
        };
        let store = self.inner.store.read();
        let record = JournalRecord {
            version: store.latest,
            txn: 0,
            next_sequence: store.sequence,
            writes: Vec::new(),
            reserved: upto,
        };
        drop(store);
        if let Err(e) = j.append(&record) {
            log::error!("cannot reserve begin timestamps: {e}");
        }
    }

    /// Continues a transaction captured with [`CatalogTxn::suspend`].
    pub fn resume(&self, mut state: CatalogTxnState) -> CatalogTxn {
        {
            let mut t = self.inner.tickets.lock();
            t.counter = t.counter.max(state.id);
            if state.status == TxnStatus::Active {
                t.active.insert(state.id);
            }
        }
        let writes = std::mem::take(&mut state.writes).into_iter().collect();
        let reads = std::mem::take(&mut state.reads).into_iter().collect();
        CatalogTxn {
            catalog: self.clone(),
            state,
            writes,
            reads,
        }
    }

    /// Smallest begin timestamp of any transaction still running, if any.
    pub fn oldest_active(&self) -> Option<u64> {
        self.inner.tickets.lock().active.first().copied()
    }

    /// Registers an externally tracked transaction as running.
    pub fn pin(&self, begin_ts: u64) {
        let mut t = self.inner.tickets.lock();
        t.counter = t.counter.max(begin_ts);
        t.active.insert(begin_ts);
    }

    pub fn unpin(&self, begin_ts: u64) {
        self.inner.tickets.lock().active.remove(&begin_ts);
    }

    pub fn get_latest(&self, key: &Key) -> Option<Row> {
        let store = self.inner.store.read();
        store.read_at(key, store.latest).cloned()
    }

    pub fn scan_latest(&self, range: &KeyRange) -> Vec<(Key, Row)> {
        let store = self.inner.store.read();
        scan_at(&store, range, store.latest)
    }

    /// Serializes every committed row at the latest version.
    pub fn export_snapshot(&self) -> Vec<u8> {
        let store = self.inner.store.read();
        let rows = store
            .chains
            .iter()
            .filter_map(|(k, c)| resolve(c, store.latest).map(|r| (k.clone(), r.clone())))
            .collect();
        let snap = CatalogSnapshot {
            version: store.latest,
            next_sequence: store.sequence,
            rows,
        };
        serde_json::to_vec_pretty(&snap).expect("snapshot serializes")
    }

    /// Loads an exported snapshot into an empty catalog.
    pub fn import_snapshot(&self, bytes: &[u8]) -> CatalogResult<()> {
        let snap: CatalogSnapshot =
            serde_json::from_slice(bytes).map_err(|e| CatalogError::Corrupt(format!("snapshot: {e}")))?;
        let mut journal = self.inner.journal.lock();
        if !self.inner.store.read().chains.is_empty() {
            return Err(CatalogError::NotEmpty);
        }
        let version = {
            let mut t = self.inner.tickets.lock();
            t.counter = t.counter.max(snap.version) + 1;
            t.counter
        };
        let record = JournalRecord {
            version,
            txn: 0,
            next_sequence: snap.next_sequence,
            writes: snap.rows.into_iter().map(|(k, r)| (k, Some(r))).collect(),
            reserved: 0,
        };
        if let Some(j) = journal.as_mut() {
            j.append(&record)?;
        }
        self.inner.store.write().apply(&record);
        Ok(())
    }
}

fn scan_at(store: &Store, range: &KeyRange, version: Version) -> Vec<(Key, Row)> {
    store
        .chains
        .range(range.bounds())
        .filter_map(|(k, c)| resolve(c, version).map(|r| (k.clone(), r.clone())))
        .collect()
}

/// An open catalog transaction. Dropping an active transaction aborts it.
#[derive(Debug)]
pub struct CatalogTxn {
    catalog: Catalog,
    state: CatalogTxnState,
    writes: BTreeMap<Key, Pending>,
    reads: BTreeSet<Key>,
}

impl CatalogTxn {
    pub fn id(&self) -> u64 {
        self.state.id
    }

    /// Begin timestamp; shares a counter with commit versions.
    pub fn begin_ts(&self) -> u64 {
        self.state.id
    }

    pub fn begin_version(&self) -> Version {
        self.state.begin_version
    }

    pub fn read_version(&self) -> Version {
        self.state.read_version
    }

    pub fn isolation(&self) -> Isolation {
        self.state.isolation
    }

    pub fn status(&self) -> TxnStatus {
        self.state.status
    }

    pub fn has_writes(&self) -> bool {
        !self.writes.is_empty()
    }

    fn check_active(&self) -> CatalogResult<()> {
        match self.state.status {
            TxnStatus::Active => Ok(()),
            _ => Err(CatalogError::TxnClosed(self.state.id)),
        }
    }

    /// Under read-committed snapshot, moves reads to the latest committed
    /// version. A no-op for the other levels.
    pub fn begin_statement(&mut self) -> Version {
        if self.state.isolation == Isolation::ReadCommittedSnapshot {
            self.state.read_version = self.catalog.latest_version();
        }
        self.state.read_version
    }

    fn track_read(&mut self, key: &Key) {
        if self.state.isolation == Isolation::Serializable && key.validated_on_read() {
            self.reads.insert(key.clone());
        }
    }

    fn own(&self, key: &Key, committed: Option<&Row>) -> Option<Option<Row>> {
        let p = self.writes.get(key)?;
        Some(match &p.op {
            PendingOp::Put(r) => Some(r.clone()),
            PendingOp::Delete => None,
            PendingOp::BumpWriteSet => Some(bumped(key, committed)),
        })
    }

    pub fn get(&mut self, key: &Key) -> CatalogResult<Option<Row>> {
        self.check_active()?;
        self.track_read(key);
        let store = self.catalog.inner.store.read();
        let committed = store.read_at(key, self.state.read_version);
        Ok(match self.own(key, committed) {
            Some(r) => r,
            None => committed.cloned(),
        })
    }

    /// Rows in `range` visible to this transaction, in key order.
    pub fn scan(&mut self, range: &KeyRange) -> CatalogResult<Vec<(Key, Row)>> {
        self.check_active()?;
        if self.state.isolation == Isolation::Serializable
            && !matches!(range, KeyRange::Checkpoints(_))
            && !self.state.scans.contains(range)
        {
            self.state.scans.push(range.clone());
        }
        let store = self.catalog.inner.store.read();
        let mut out: BTreeMap<Key, Row> = scan_at(&store, range, self.state.read_version).into_iter().collect();
        for (key, _) in self.writes.range(range.bounds()) {
            let committed = store.read_at(key, self.state.read_version);
            match self.own(key, committed).flatten() {
                Some(row) => out.insert(key.clone(), row),
                None => out.remove(key),
            };
        }
        Ok(out.into_iter().collect())
    }

    fn buffer(&mut self, key: Key, op: PendingOp) {
        let base = self.state.read_version;
        let order = match self.writes.get(&key) {
            Some(p) => p.order,
            None => {
                self.state.next_order += 1;
                self.state.next_order
            }
        };
        let base = self.writes.get(&key).map_or(base, |p| p.base);
        self.writes.insert(key, Pending { order, base, op });
    }

    pub fn put(&mut self, key: Key, row: Row) -> CatalogResult<()> {
        self.check_active()?;
        self.buffer(key, PendingOp::Put(row));
        Ok(())
    }

    /// Like [`put`](Self::put) but fails if the key is already visible.
    pub fn insert(&mut self, key: Key, row: Row) -> CatalogResult<()> {
        if self.get(&key)?.is_some() {
            return Err(CatalogError::DuplicateKey(format!("{key:?}")));
        }
        self.put(key, row)
    }

    pub fn delete(&mut self, key: Key) -> CatalogResult<()> {
        self.check_active()?;
        self.buffer(key, PendingOp::Delete);
        Ok(())
    }

    /// Buffers an upsert of a WriteSets row; its counter goes up by one at
    /// commit no matter how often this is called.
    pub fn upsert_write_set(&mut self, table: TableId, target: WriteTarget) -> CatalogResult<()> {
        self.check_active()?;
        let key = Key::WriteSet { table, target };
        if !matches!(self.writes.get(&key), Some(Pending { op: PendingOp::BumpWriteSet, .. })) {
            self.buffer(key, PendingOp::BumpWriteSet);
        }
        Ok(())
    }

    pub fn commit(&mut self) -> CatalogResult<CommitInfo> {
        self.check_active()?;
        let inner = self.catalog.inner.clone();
        if self.writes.is_empty() {
            self.finish(TxnStatus::Committed);
            return Ok(CommitInfo {
                version: self.state.read_version,
                manifests: Vec::new(),
            });
        }
        let mut journal = inner.journal.lock();
        if let Err(e) = self.validate(&inner.store.read()) {
            self.finish(TxnStatus::Aborted);
            return Err(e);
        }
        let version = {
            let mut t = inner.tickets.lock();
            t.counter += 1;
            t.counter
        };
        let now = inner.clock.now_ms();
        let mut ordered: Vec<(&Key, &Pending)> = self.writes.iter().collect();
        ordered.sort_by_key(|(_, p)| p.order);
        let (record, manifests) = {
            let store = inner.store.read();
            let mut sequence = store.sequence;
            let mut manifests = Vec::new();
            let writes = ordered
                .into_iter()
                .map(|(key, p)| {
                    let row = match &p.op {
                        PendingOp::Put(Row::Manifest(m)) => {
                            let mut m = m.clone();
                            if m.sequence_id == 0 {
                                sequence += 1;
                                m.sequence_id = sequence;
                            }
                            if m.commit_wallclock == 0 {
                                m.commit_wallclock = now;
                            }
                            manifests.push(m.clone());
                            Some(Row::Manifest(m))
                        }
                        PendingOp::Put(r) => Some(r.clone()),
                        PendingOp::Delete => None,
                        PendingOp::BumpWriteSet => Some(bumped(key, store.read_at(key, store.latest))),
                    };
                    (key.clone(), row)
                })
                .collect();
            (
                JournalRecord {
                    version,
                    txn: self.state.id,
                    next_sequence: sequence,
                    writes,
                    reserved: 0,
                },
                manifests,
            )
        };
        if let Some(j) = journal.as_mut() {
            if let Err(e) = j.append(&record) {
                self.finish(TxnStatus::Aborted);
                return Err(e);
            }
        }
        inner.store.write().apply(&record);
        drop(journal);
        self.finish(TxnStatus::Committed);
        Ok(CommitInfo { version, manifests })
    }

    fn validate(&self, store: &Store) -> CatalogResult<()> {
        for (key, p) in &self.writes {
            if store.newest_version(key) > p.base {
                return Err(CatalogError::WriteConflict { key: describe(key) });
            }
        }
        if self.state.isolation != Isolation::Serializable {
            return Ok(());
        }
        let since = self.state.begin_version;
        for key in &self.reads {
            if store.newest_version(key) > since {
                return Err(CatalogError::SerializationFailure { key: describe(key) });
            }
        }
        for range in &self.state.scans {
            if let Some((key, _)) = store
                .chains
                .range(range.bounds())
                .find(|(_, c)| c.last().is_some_and(|(v, _)| *v > since))
            {
                return Err(CatalogError::SerializationFailure { key: describe(key) });
            }
        }
        Ok(())
    }

    /// Discards buffered writes. Aborting twice is fine.
    pub fn abort(&mut self) {
        if self.state.status == TxnStatus::Active {
            self.finish(TxnStatus::Aborted);
        }
    }

    fn finish(&mut self, status: TxnStatus) {
        self.state.status = status;
        self.writes.clear();
        self.reads.clear();
        self.catalog.inner.tickets.lock().active.remove(&self.state.id);
    }

    /// Captures the transaction so another process can resume it. The
    /// transaction stays registered as running.
    pub fn suspend(mut self) -> CatalogTxnState {
        let mut state = self.state.clone();
        state.writes = std::mem::take(&mut self.writes).into_iter().collect();
        state.reads = std::mem::take(&mut self.reads).into_iter().collect();
        self.state.status = TxnStatus::Committed;
        state
    }
}

impl Drop for CatalogTxn {
    fn drop(&mut self) {
        self.abort();
    }
}

fn bumped(key: &Key, committed: Option<&Row>) -> Row {
    let Key::WriteSet { table, target } = key else {
        unreachable!("only WriteSets keys are bumped")
    };
    let updated = committed.and_then(Row::as_write_set).map_or(0, |w| w.updated) + 1;
    Row::WriteSet(WriteSetsRow {
        table_id: *table,
        target: target.clone(),
        updated,
    })
}

fn describe(key: &Key) -> String {
    match key {
        Key::WriteSet { table, target } => format!("WriteSets({table}, {target})"),
        Key::Manifest { table, file } => format!("Manifests({table}, {file})"),
        Key::Table(t) => format!("Tables({t})"),
        Key::TableName(n) => format!("Tables(name={n})"),
        Key::Checkpoint { table, upto } => format!("Checkpoints({table}, {upto})"),
        Key::Counter(c) => format!("Counter({c})"),
    }
}
