//! Transactions over log-structured tables.
//!
//! A transaction reads the committed table state its catalog snapshot
//! exposes, overlaid with its own uncommitted changes. Statements run as
//! tasks on the [`Dcp`]. Write tasks stage blocks of the per-table
//! transaction manifest and the coordinator commits the block list after
//! each statement. Commit publishes one Manifests row per modified table.

mod predicate;
mod state;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crossbeam_channel::{Receiver, Sender};
use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use predicate::{Assignments, BoundPredicate, CmpOp, Predicate, Term};
pub(crate) use state::StateCache;

use crate::catalog::{
    self, Catalog, CatalogError, CatalogTxn, CatalogTxnState, CheckpointRow, Isolation, Key, KeyRange, ManifestsRow,
    TableDef, TxnStatus, Version, WriteTarget,
};
use crate::clock::{Clock, Millis, SystemClock};
use crate::config::EngineConfig;
use crate::datafile::{
    decode_data_file, encode_data_file, encode_delete_vector, read_data_file, ColumnType, DeleteVector,
    DeleteVectorFile, Row, Schema, Value,
};
use crate::dcp::{coordinator_block, distribute, Cell, Dcp, Layout, StatementScope, Task, TaskCtx, TaskError, TaskKind};
use crate::error::{EngineError, EngineResult};
use crate::manifest::{
    decode_actions, encode_action_block, overlay, reconcile, LiveFile, ManifestAction, SequenceId, TableId,
    TableState, TransactionManifest,
};
use crate::object_store::{put_if_absent_or_same, BlockId, LocalFsStore, MemoryStore, ObjectPath, ObjectStore};
use crate::paths;

/// What a modifying statement registers in the WriteSets table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Any two modifications of the same table conflict.
    #[default]
    Table,
    /// Modifications conflict only when they touch the same data file.
    File,
}

impl FromStr for Granularity {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "table" => Ok(Self::Table),
            "file" => Ok(Self::File),
            _ => Err(EngineError::Invalid(format!("unknown granularity {s:?}"))),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Table => "table",
            Self::File => "file",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSpec {
    pub name: String,
    pub schema: Schema,
    #[serde(default = "one")]
    pub distribution_count: u32,
    #[serde(default)]
    pub distribution_key: Vec<String>,
    #[serde(default)]
    pub partition_key: Vec<String>,
}

fn one() -> u32 {
    1
}

impl TableSpec {
    pub fn new(name: &str, schema: Schema) -> Self {
        Self {
            name: name.to_owned(),
            schema,
            distribution_count: 1,
            distribution_key: Vec::new(),
            partition_key: Vec::new(),
        }
    }

    pub fn distributions(mut self, n: u32) -> Self {
        self.distribution_count = n;
        self
    }

    pub fn distribute_by(mut self, columns: &[&str]) -> Self {
        self.distribution_key = columns.iter().map(|c| c.to_string()).collect();
        self
    }

    pub fn partition_by(mut self, columns: &[&str]) -> Self {
        self.partition_key = columns.iter().map(|c| c.to_string()).collect();
        self
    }
}

/// A historical point of a table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsOf {
    /// State after every commit with a sequence id up to this one.
    Sequence(SequenceId),
    /// State after the latest commit whose wall clock is at or before this time.
    Time(Millis),
}

impl FromStr for AsOf {
    type Err = EngineError;

    /// `seq:N` selects a sequence id; `N` or `ms:N` a commit wall clock.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EngineError::Invalid(format!("cannot parse as-of point {s:?}"));
        if let Some(n) = s.strip_prefix("seq:") {
            return n.parse().map(Self::Sequence).map_err(|_| bad());
        }
        s.strip_prefix("ms:").unwrap_or(s).parse().map(Self::Time).map_err(|_| bad())
    }
}

impl fmt::Display for AsOf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Sequence(s) => write!(f, "seq:{s}"),
            Self::Time(t) => write!(f, "ms:{t}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Aggregate {
    Sum(String),
    Count,
}

#[derive(Clone, Debug, Default)]
pub struct ScanOptions {
    /// Output columns; every column when `None`.
    pub projection: Option<Vec<String>>,
    pub predicate: Predicate,
    pub aggregate: Option<Aggregate>,
    pub as_of: Option<AsOf>,
}

impl ScanOptions {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn sum(column: &str) -> Self {
        Self {
            aggregate: Some(Aggregate::Sum(column.to_owned())),
            ..Self::default()
        }
    }

    pub fn count() -> Self {
        Self {
            aggregate: Some(Aggregate::Count),
            ..Self::default()
        }
    }

    pub fn filter(mut self, predicate: Predicate) -> Self {
        self.predicate = predicate;
        self
    }

    pub fn project(mut self, columns: &[&str]) -> Self {
        self.projection = Some(columns.iter().map(|c| c.to_string()).collect());
        self
    }

    pub fn as_of(mut self, point: AsOf) -> Self {
        self.as_of = Some(point);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanResult {
    pub columns: Vec<String>,
    /// Matching rows in file order; empty for aggregates.
    pub rows: Vec<Row>,
    pub aggregate: Option<Value>,
    pub files_read: usize,
    pub files_pruned: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommitOutcome {
    pub version: Version,
    /// Published Manifests rows; empty for read-only transactions.
    pub manifests: Vec<ManifestsRow>,
}

/// Sent to subscribers after every commit that published a manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitNotice {
    pub version: Version,
    pub tables: Vec<TableId>,
}

/// Shared engine handle; cheap to clone.
#[derive(Clone, Debug)]
pub struct Database {
    inner: Arc<DbInner>,
}

#[derive(Debug)]
pub(crate) struct DbInner {
    pub config: EngineConfig,
    pub catalog: Catalog,
    pub store: Arc<dyn ObjectStore>,
    pub dcp: Dcp,
    pub cache: StateCache,
    pub gc_lock: Mutex<()>,
    nonces: Mutex<ChaCha8Rng>,
    listeners: Mutex<Vec<Sender<CommitNotice>>>,
}

impl Database {
    pub fn new(store: Arc<dyn ObjectStore>, catalog: Catalog, config: EngineConfig) -> Self {
        Self {
            inner: Arc::new(DbInner {
                dcp: Dcp::new(config.dcp.clone()),
                nonces: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed)),
                config,
                catalog,
                store,
                cache: StateCache::default(),
                gc_lock: Mutex::new(()),
                listeners: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn in_memory(config: EngineConfig) -> Self {
        Self::in_memory_with_clock(config, Arc::new(SystemClock))
    }

    pub fn in_memory_with_clock(config: EngineConfig, clock: Arc<dyn Clock>) -> Self {
        Self::new(Arc::new(MemoryStore::new()), Catalog::in_memory(clock), config)
    }

    /// Opens a database persisted under `root`: objects in `root/objects`,
    /// the catalog journal in `root/catalog`.
    pub fn open(root: &Path, config: EngineConfig, clock: Arc<dyn Clock>) -> EngineResult<Self> {
        let store = LocalFsStore::open(root.join("objects"))?;
        let catalog = Catalog::open(&root.join("catalog"), clock)?;
        Ok(Self::new(Arc::new(store), catalog, config))
    }

    pub(crate) fn inner(&self) -> &DbInner {
        &self.inner
    }

    pub fn config(&self) -> &EngineConfig {
        &self.inner.config
    }

    pub fn catalog(&self) -> &Catalog {
        &self.inner.catalog
    }

    pub fn store(&self) -> &Arc<dyn ObjectStore> {
        &self.inner.store
    }

    pub fn dcp(&self) -> &Dcp {
        &self.inner.dcp
    }

    pub fn now_ms(&self) -> Millis {
        self.inner.catalog.now_ms()
    }

    /// Receives a notice for every later commit that publishes a manifest.
    pub fn subscribe(&self) -> Receiver<CommitNotice> {
        let (tx, rx) = crossbeam_channel::unbounded();
        self.inner.listeners.lock().push(tx);
        rx
    }

    fn notify(&self, notice: CommitNotice) {
        self.inner.listeners.lock().retain(|l| l.send(notice.clone()).is_ok());
    }

    fn next_guid(&self, begin_ts: u64) -> String {
        paths::txn_guid(begin_ts, self.inner.nonces.lock().next_u64())
    }

    pub fn begin(&self) -> Txn {
        self.begin_with(self.inner.config.isolation, self.inner.config.granularity)
    }

    pub fn begin_with(&self, isolation: Isolation, granularity: Granularity) -> Txn {
        let cat = self.inner.catalog.begin(isolation);
        let guid = self.next_guid(cat.begin_ts());
        Txn {
            db: self.clone(),
            cat,
            guid,
            granularity,
            statement: 0,
            snapshots: HashMap::new(),
            own: BTreeMap::new(),
        }
    }

    /// Continues a transaction captured with [`Txn::suspend`].
    pub fn resume(&self, session: TxnSession) -> Txn {
        Txn {
            db: self.clone(),
            cat: self.inner.catalog.resume(session.catalog),
            guid: session.guid,
            granularity: session.granularity,
            statement: session.statement,
            snapshots: HashMap::new(),
            own: session.own.into_iter().collect(),
        }
    }

    /// Latest committed definition of `name`.
    pub fn table(&self, name: &str) -> EngineResult<TableDef> {
        let cat = self.catalog();
        let Some(catalog::Row::TableName(id)) = cat.get_latest(&Key::TableName(name.to_owned())) else {
            return Err(EngineError::UnknownTable(name.to_owned()));
        };
        cat.get_latest(&Key::Table(id))
            .and_then(|r| r.as_table().cloned())
            .ok_or_else(|| EngineError::UnknownTable(name.to_owned()))
    }

    pub fn tables(&self) -> Vec<TableDef> {
        self.catalog()
            .scan_latest(&KeyRange::Tables)
            .into_iter()
            .filter_map(|(_, r)| r.as_table().cloned())
            .collect()
    }

    /// Committed Manifests rows of `table`, by sequence id.
    pub fn manifests(&self, table: TableId) -> Vec<ManifestsRow> {
        let mut rows: Vec<ManifestsRow> = self
            .catalog()
            .scan_latest(&KeyRange::Manifests(table))
            .into_iter()
            .filter_map(|(_, r)| r.as_manifest().cloned())
            .collect();
        rows.sort_by_key(|r| r.sequence_id);
        rows
    }

    pub fn checkpoints(&self, table: TableId) -> Vec<CheckpointRow> {
        self.catalog()
            .scan_latest(&KeyRange::Checkpoints(table))
            .into_iter()
            .filter_map(|(_, r)| r.as_checkpoint().cloned())
            .collect()
    }

    /// Latest committed state of `table`.
    pub fn committed_state(&self, table: TableId) -> EngineResult<Arc<TableState>> {
        self.state_of(table, &self.manifests(table), &self.checkpoints(table))
    }

    /// State after applying `rows`, a sequence-ordered prefix of the table's manifests.
    pub fn state_of(&self, table: TableId, rows: &[ManifestsRow], checkpoints: &[CheckpointRow]) -> EngineResult<Arc<TableState>> {
        self.inner.cache.state(&*self.inner.store, table, rows, checkpoints)
    }

    /// Decoded committed manifest named by `row`.
    pub fn manifest(&self, row: &ManifestsRow) -> EngineResult<Arc<TransactionManifest>> {
        self.inner.cache.manifest(&*self.inner.store, row)
    }

    /// Maps a historical point to the last sequence id it includes.
    pub fn resolve_as_of(&self, rows: &[ManifestsRow], point: AsOf) -> EngineResult<SequenceId> {
        let seq = match point {
            AsOf::Sequence(s) => s,
            AsOf::Time(t) => match rows.iter().filter(|r| r.commit_wallclock <= t).map(|r| r.commit_wallclock).max() {
                None => 0,
                Some(w) => rows
                    .iter()
                    .filter(|r| r.commit_wallclock == w)
                    .map(|r| r.sequence_id)
                    .min()
                    .unwrap_or(0),
            },
        };
        if let Some(next) = rows.iter().find(|r| r.sequence_id > seq) {
            let retention = self.inner.config.maintenance.retention_ms;
            if next.commit_wallclock.saturating_add(retention) < self.now_ms() {
                return Err(EngineError::OutOfRetention(point.to_string()));
            }
        }
        Ok(seq)
    }

    pub fn create_table(&self, spec: TableSpec) -> EngineResult<TableDef> {
        let name = spec.name.clone();
        if name.is_empty() || name == "." || name == ".." || name.contains('/') {
            return Err(EngineError::Invalid(format!("invalid table name {name:?}")));
        }
        if spec.distribution_count == 0 {
            return Err(EngineError::Invalid("distribution_count must be at least 1".into()));
        }
        let mut def = TableDef {
            id: 0,
            name: spec.name,
            schema: spec.schema,
            distribution_count: spec.distribution_count,
            distribution_key: spec.distribution_key,
            partition_key: spec.partition_key,
        };
        Layout::of(&def)?;
        self.autocommit(|cat| {
            if cat.get(&Key::TableName(name.clone()))?.is_some() {
                return Err(EngineError::TableExists(name.clone()));
            }
            def.id = next_table_id(cat)?;
            cat.put(Key::Table(def.id), catalog::Row::Table(def.clone()))?;
            cat.put(Key::TableName(name.clone()), catalog::Row::TableName(def.id))?;
            Ok(def.clone())
        })
    }

    /// Removes the table and all its catalog rows. Its objects are left to GC.
    pub fn drop_table(&self, name: &str) -> EngineResult<()> {
        let id = self.autocommit(|cat| {
            let def = lookup(cat, name)?;
            cat.delete(Key::Table(def.id))?;
            cat.delete(Key::TableName(def.name.clone()))?;
            for range in [
                KeyRange::Manifests(def.id),
                KeyRange::WriteSets(def.id),
                KeyRange::Checkpoints(def.id),
            ] {
                for (k, _) in cat.scan(&range)? {
                    cat.delete(k)?;
                }
            }
            Ok(def.id)
        })?;
        self.inner.cache.forget_table(id);
        Ok(())
    }

    /// Creates `dst` sharing the manifests of `src` up to `as_of` (the
    /// latest commit when `None`). No data object is copied.
    pub fn clone_table(&self, src: &str, dst: &str, as_of: Option<AsOf>) -> EngineResult<TableDef> {
        if dst.is_empty() || dst.contains('/') {
            return Err(EngineError::Invalid(format!("invalid table name {dst:?}")));
        }
        self.autocommit(|cat| {
            let source = lookup(cat, src)?;
            if cat.get(&Key::TableName(dst.to_owned()))?.is_some() {
                return Err(EngineError::TableExists(dst.to_owned()));
            }
            let rows = manifest_rows(cat, source.id)?;
            let upto = match as_of {
                None => rows.last().map_or(0, |r| r.sequence_id),
                Some(p) => self.resolve_as_of(&rows, p)?,
            };
            let def = TableDef {
                id: next_table_id(cat)?,
                name: dst.to_owned(),
                ..source
            };
            cat.put(Key::Table(def.id), catalog::Row::Table(def.clone()))?;
            cat.put(Key::TableName(def.name.clone()), catalog::Row::TableName(def.id))?;
            let txn_id = cat.id();
            for r in rows.into_iter().filter(|r| r.sequence_id <= upto) {
                cat.put(
                    Key::manifest(def.id, &r.manifest_file),
                    catalog::Row::Manifest(ManifestsRow {
                        table_id: def.id,
                        manifest_file: r.manifest_file,
                        sequence_id: 0,
                        transaction_id: txn_id,
                        commit_wallclock: r.commit_wallclock,
                    }),
                )?;
            }
            Ok(def)
        })
    }

    /// Runs `body` in its own snapshot catalog transaction, retrying on conflict.
    fn autocommit<T>(&self, mut body: impl FnMut(&mut CatalogTxn) -> EngineResult<T>) -> EngineResult<T> {
        loop {
            let mut cat = self.catalog().begin(Isolation::Snapshot);
            let out = body(&mut cat)?;
            match cat.commit() {
                Ok(info) => {
                    if !info.manifests.is_empty() {
                        self.notify(CommitNotice {
                            version: info.version,
                            tables: tables_of(&info.manifests),
                        });
                    }
                    return Ok(out);
                }
                Err(e) if e.is_retryable() => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
}

fn tables_of(rows: &[ManifestsRow]) -> Vec<TableId> {
    let set: BTreeSet<TableId> = rows.iter().map(|r| r.table_id).collect();
    set.into_iter().collect()
}

fn next_table_id(cat: &mut CatalogTxn) -> EngineResult<TableId> {
    let key = Key::Counter("table_id".into());
    let n = match cat.get(&key)? {
        Some(catalog::Row::Counter(n)) => n + 1,
        _ => 1,
    };
    cat.put(key, catalog::Row::Counter(n))?;
    Ok(n)
}

fn lookup(cat: &mut CatalogTxn, name: &str) -> EngineResult<TableDef> {
    let Some(catalog::Row::TableName(id)) = cat.get(&Key::TableName(name.to_owned()))? else {
        return Err(EngineError::UnknownTable(name.to_owned()));
    };
    cat.get(&Key::Table(id))?
        .and_then(|r| r.as_table().cloned())
        .ok_or_else(|| EngineError::UnknownTable(name.to_owned()))
}

fn manifest_rows(cat: &mut CatalogTxn, table: TableId) -> EngineResult<Vec<ManifestsRow>> {
    let mut rows: Vec<ManifestsRow> = cat
        .scan(&KeyRange::Manifests(table))?
        .into_iter()
        .filter_map(|(_, r)| r.as_manifest().cloned())
        .collect();
    rows.sort_by_key(|r| r.sequence_id);
    Ok(rows)
}

#[derive(Clone, Debug)]
struct Snapshot {
    rows: Arc<Vec<ManifestsRow>>,
    checkpoints: Arc<Vec<CheckpointRow>>,
    state: Arc<TableState>,
}

/// Uncommitted manifest of one table and the block list its object holds.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct OwnManifest {
    path: ObjectPath,
    actions: Vec<ManifestAction>,
    blocks: Vec<BlockId>,
}

impl OwnManifest {
    fn manifest(&self, table: TableId) -> TransactionManifest {
        TransactionManifest {
            table,
            actions: self.actions.clone(),
            blocks: self.blocks.clone(),
        }
    }
}

/// A suspended transaction that can be resumed by another process.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TxnSession {
    catalog: CatalogTxnState,
    guid: String,
    granularity: Granularity,
    statement: u32,
    own: Vec<(TableId, OwnManifest)>,
}

impl TxnSession {
    pub fn begin_ts(&self) -> u64 {
        self.catalog.id
    }

    pub fn isolation(&self) -> Isolation {
        self.catalog.isolation
    }
}

#[derive(Debug)]
pub struct Txn {
    db: Database,
    cat: CatalogTxn,
    guid: String,
    granularity: Granularity,
    statement: u32,
    snapshots: HashMap<TableId, Snapshot>,
    own: BTreeMap<TableId, OwnManifest>,
}

struct Masked {
    tasks: u32,
    deleted: u64,
    updated: Vec<Row>,
}

impl Txn {
    pub fn begin_ts(&self) -> u64 {
        self.cat.begin_ts()
    }

    /// Unique tag carried by every object the transaction writes.
    pub fn guid(&self) -> &str {
        &self.guid
    }

    pub fn isolation(&self) -> Isolation {
        self.cat.isolation()
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn status(&self) -> TxnStatus {
        self.cat.status()
    }

    pub fn database(&self) -> &Database {
        &self.db
    }

    fn check_active(&self) -> EngineResult<()> {
        match self.cat.status() {
            TxnStatus::Active => Ok(()),
            s => Err(EngineError::TxnClosed(s)),
        }
    }

    fn start_statement(&mut self) -> EngineResult<u32> {
        self.check_active()?;
        let before = self.cat.read_version();
        if self.cat.begin_statement() != before {
            self.snapshots.clear();
        }
        self.statement += 1;
        Ok(self.statement)
    }

    pub fn table(&mut self, name: &str) -> EngineResult<TableDef> {
        self.check_active()?;
        lookup(&mut self.cat, name)
    }

    fn snapshot(&mut self, table: TableId) -> EngineResult<Snapshot> {
        if let Some(s) = self.snapshots.get(&table) {
            return Ok(s.clone());
        }
        let rows = manifest_rows(&mut self.cat, table)?;
        let checkpoints: Vec<CheckpointRow> = self
            .cat
            .scan(&KeyRange::Checkpoints(table))?
            .into_iter()
            .filter_map(|(_, r)| r.as_checkpoint().cloned())
            .collect();
        let state = self.db.state_of(table, &rows, &checkpoints)?;
        let snap = Snapshot {
            rows: Arc::new(rows),
            checkpoints: Arc::new(checkpoints),
            state,
        };
        self.snapshots.insert(table, snap.clone());
        Ok(snap)
    }

    /// Snapshot state overlaid with this transaction's own changes.
    fn view(&mut self, table: TableId) -> EngineResult<Arc<TableState>> {
        let snap = self.snapshot(table)?;
        match self.own.get(&table) {
            Some(own) if !own.actions.is_empty() => match overlay(&snap.state, &own.manifest(table)) {
                Ok(v) => Ok(Arc::new(v)),
                Err(e) if self.isolation() == Isolation::ReadCommittedSnapshot => {
                    Err(EngineError::Conflict(CatalogError::WriteConflict { key: e.to_string() }))
                }
                Err(e) => Err(e.into()),
            },
            _ => Ok(snap.state),
        }
    }

    /// Current contents of `name` as this transaction sees them.
    pub fn table_state(&mut self, name: &str) -> EngineResult<Arc<TableState>> {
        let def = self.table(name)?;
        self.view(def.id)
    }

    /// The uncommitted manifest of `table`, if this transaction wrote it.
    pub fn own_manifest(&self, table: TableId) -> Option<TransactionManifest> {
        self.own.get(&table).map(|o| o.manifest(table))
    }

    fn state_as_of(&mut self, def: &TableDef, point: AsOf) -> EngineResult<Arc<TableState>> {
        if self.own.get(&def.id).is_some_and(|o| !o.actions.is_empty()) {
            return Err(EngineError::AsOfAfterWrite(def.name.clone()));
        }
        let snap = self.snapshot(def.id)?;
        let seq = self.db.resolve_as_of(&snap.rows, point)?;
        let upto = snap.rows.partition_point(|r| r.sequence_id <= seq);
        self.db.state_of(def.id, &snap.rows[..upto], &snap.checkpoints)
    }

    fn manifest_path(&mut self, table: TableId) -> ObjectPath {
        let ws = &self.db.inner.config.workspace;
        let guid = &self.guid;
        self.own
            .entry(table)
            .or_insert_with(|| OwnManifest {
                path: paths::manifest(ws, table, guid),
                actions: Vec::new(),
                blocks: Vec::new(),
            })
            .path
            .clone()
    }

    fn insert_tasks<'a>(
        &self,
        def: &'a TableDef,
        statement: u32,
        first_task: u32,
        buckets: BTreeMap<u32, Vec<Row>>,
    ) -> Vec<Task<'a, u64>> {
        let ws = &self.db.inner.config.workspace;
        let stamp = self.begin_ts();
        buckets
            .into_iter()
            .enumerate()
            .map(|(i, (bucket, rows))| {
                let id = first_task + i as u32;
                let path = paths::data_file(ws, def.id, &self.guid, statement, id);
                let cell = Cell {
                    partition: 0,
                    distribution: bucket,
                };
                Task::new(id, TaskKind::Write, vec![cell], move |ctx| {
                    write_rows(ctx, &path, &def.schema, &rows, stamp)
                })
            })
            .collect()
    }

    fn run<T: Send>(&self, statement: u32, manifest: Option<&ObjectPath>, tasks: Vec<Task<'_, T>>) -> EngineResult<crate::dcp::StatementOutput<T>> {
        let scope = StatementScope {
            store: &*self.db.inner.store,
            manifest,
            tag: &self.guid,
            statement,
        };
        Ok(self.db.inner.dcp.execute(scope, tasks)?)
    }

    pub fn insert(&mut self, table: &str, rows: Vec<Row>) -> EngineResult<u64> {
        let statement = self.start_statement()?;
        let def = lookup(&mut self.cat, table)?;
        for r in &rows {
            def.schema.check_row(r)?;
        }
        if rows.is_empty() {
            return Ok(0);
        }
        let count = rows.len() as u64;
        let buckets = distribute(rows, &Layout::of(&def)?);
        let path = self.manifest_path(def.id);
        let out = self.run(statement, Some(&path), self.insert_tasks(&def, statement, 0, buckets))?;
        self.finish_statement(&def, statement, out.blocks)?;
        Ok(count)
    }

    pub fn delete(&mut self, table: &str, predicate: &Predicate) -> EngineResult<u64> {
        let statement = self.start_statement()?;
        let def = lookup(&mut self.cat, table)?;
        let bound = predicate.bind(&def.schema)?;
        let (masked, blocks) = self.mask(&def, statement, &bound, None)?;
        self.finish_statement(&def, statement, blocks)?;
        Ok(masked.deleted)
    }

    /// Masks matching rows and appends their new versions.
    pub fn update(&mut self, table: &str, set: &Assignments, predicate: &Predicate) -> EngineResult<u64> {
        let statement = self.start_statement()?;
        let def = lookup(&mut self.cat, table)?;
        let bound = predicate.bind(&def.schema)?;
        let assignments = set.bind(&def.schema)?;
        let (masked, mut blocks) = self.mask(&def, statement, &bound, Some(assignments))?;
        if !masked.updated.is_empty() {
            let first = masked.tasks;
            let buckets = distribute(masked.updated, &Layout::of(&def)?);
            let path = self.manifest_path(def.id);
            let out = self.run(statement, Some(&path), self.insert_tasks(&def, statement, first, buckets))?;
            blocks.extend(out.blocks);
        }
        self.finish_statement(&def, statement, blocks)?;
        Ok(masked.deleted)
    }

    fn candidates(&mut self, def: &TableDef, bound: &BoundPredicate) -> EngineResult<Vec<Arc<LiveFile>>> {
        let view = self.view(def.id)?;
        Ok(view
            .live
            .values()
            .filter(|f| bound.may_match(&f.meta.stats))
            .cloned()
            .collect())
    }

    fn mask(
        &mut self,
        def: &TableDef,
        statement: u32,
        bound: &BoundPredicate,
        set: Option<Vec<(usize, Value)>>,
    ) -> EngineResult<(Masked, Vec<BlockId>)> {
        let files = self.candidates(def, bound)?;
        let mut masked = Masked {
            tasks: files.len() as u32,
            deleted: 0,
            updated: Vec::new(),
        };
        if files.is_empty() {
            return Ok((masked, Vec::new()));
        }
        let path = self.manifest_path(def.id);
        let ws = &self.db.inner.config.workspace;
        let set = set.as_deref();
        let tasks = files
            .iter()
            .enumerate()
            .map(|(i, file)| {
                let id = i as u32;
                let dv_path = paths::delete_vector(ws, def.id, &self.guid, statement, id);
                let cell = Cell {
                    partition: 0,
                    distribution: id,
                };
                Task::new(id, TaskKind::Write, vec![cell], move |ctx| mask_file(ctx, file, bound, &dv_path, set))
            })
            .collect();
        let out = self.run(statement, Some(&path), tasks)?;
        for (_, (n, rows)) in out.results {
            masked.deleted += n;
            masked.updated.extend(rows);
        }
        Ok((masked, out.blocks))
    }

    /// Rewrites `files` into new files of about `rows_per_file` live rows,
    /// removing the originals. Returns the number of files written.
    pub(crate) fn rewrite_files(&mut self, table: &str, files: &[ObjectPath], rows_per_file: usize) -> EngineResult<usize> {
        let statement = self.start_statement()?;
        let def = lookup(&mut self.cat, table)?;
        let view = self.view(def.id)?;
        let selected: Vec<Arc<LiveFile>> = files
            .iter()
            .map(|p| {
                view.live
                    .get(p)
                    .cloned()
                    .ok_or_else(|| EngineError::Invalid(format!("{p} is not live")))
            })
            .collect::<EngineResult<_>>()?;
        if selected.is_empty() {
            return Ok(0);
        }
        let all = Predicate::all().bind(&def.schema)?;
        let all = &all;
        let reads = selected
            .iter()
            .enumerate()
            .map(|(i, f)| Task::new(i as u32, TaskKind::Read, vec![], move |ctx| read_file(ctx, f, all)))
            .collect();
        let rows: Vec<Row> = self
            .run(statement, None, reads)?
            .results
            .into_iter()
            .flat_map(|(_, r)| r)
            .collect();
        let chunks = chunk_rows(rows, rows_per_file.max(1));
        let written = chunks.len();
        let path = self.manifest_path(def.id);
        let buckets: BTreeMap<u32, Vec<Row>> = chunks.into_iter().enumerate().map(|(i, c)| (i as u32, c)).collect();
        let mut tasks = self.insert_tasks(&def, statement, 0, buckets);
        let removes: Vec<ManifestAction> = selected
            .iter()
            .map(|f| ManifestAction::RemoveDataFile {
                path: f.meta.path.clone(),
            })
            .collect();
        tasks.push(Task::new(written as u32, TaskKind::Write, vec![], move |ctx| {
            ctx.stage(&encode_action_block(&removes))?;
            Ok(0)
        }));
        let out = self.run(statement, Some(&path), tasks)?;
        self.finish_statement(&def, statement, out.blocks)?;
        Ok(written)
    }

    /// Commits the statement's blocks into the manifest object, reconciles
    /// it with earlier statements and registers write-set keys.
    fn finish_statement(&mut self, def: &TableDef, statement: u32, blocks: Vec<BlockId>) -> EngineResult<()> {
        if blocks.is_empty() {
            return Ok(());
        }
        let committed = self.snapshot(def.id)?.state;
        let store = self.db.inner.store.clone();
        let own = self.own.get_mut(&def.id).expect("manifest path allocated before tasks run");
        let mut list = own.blocks.clone();
        list.extend_from_slice(&blocks);
        store.commit_block_list(&own.path, &list)?;
        let decoded = decode_actions(&store.get_object(&own.path)?)?;
        let prior = own.actions.len();
        if decoded.len() < prior || decoded[..prior] != own.actions[..] {
            return Err(EngineError::Invalid(format!("manifest {} does not extend its previous content", own.path)));
        }
        let fresh = decoded[prior..].to_vec();
        let rec = reconcile(&own.manifest(def.id), &fresh);
        for dv in &rec.pending_delete_vectors {
            put_if_absent_or_same(&*store, &dv.path, &encode_delete_vector(&dv.vector))?;
        }
        if rec.manifest.actions == decoded {
            own.blocks = list;
        } else if rec.manifest.actions.is_empty() {
            store.commit_block_list(&own.path, &[])?;
            own.blocks = Vec::new();
        } else {
            let block = coordinator_block(&self.guid, statement);
            store.stage_block(&own.path, &block, &encode_action_block(&rec.manifest.actions))?;
            store.commit_block_list(&own.path, &[block])?;
            own.blocks = vec![block];
        }
        own.actions = rec.manifest.actions;

        let touched: BTreeSet<&ObjectPath> = fresh
            .iter()
            .filter_map(|a| a.modified_data_file())
            .filter(|p| committed.live.contains_key(*p))
            .collect();
        if !touched.is_empty() {
            for p in touched {
                self.cat.upsert_write_set(def.id, WriteTarget::File(p.clone()))?;
            }
            if self.granularity == Granularity::Table {
                self.cat.upsert_write_set(def.id, WriteTarget::WholeTable)?;
            }
        }
        Ok(())
    }

    pub fn scan(&mut self, table: &str, opts: &ScanOptions) -> EngineResult<ScanResult> {
        let statement = self.start_statement()?;
        let def = lookup(&mut self.cat, table)?;
        let state = match opts.as_of {
            Some(point) => self.state_as_of(&def, point)?,
            None => self.view(def.id)?,
        };
        let bound = opts.predicate.bind(&def.schema)?;
        let columns: Vec<String> = match &opts.projection {
            Some(p) => p.clone(),
            None => def.schema.columns().iter().map(|c| c.name.clone()).collect(),
        };
        let indices = columns
            .iter()
            .map(|c| def.schema.index_of(c))
            .collect::<Result<Vec<_>, _>>()?;
        let sum_column = match &opts.aggregate {
            Some(Aggregate::Sum(c)) => {
                let i = def.schema.index_of(c)?;
                let ty = def.schema.columns()[i].ty;
                if !matches!(ty, ColumnType::Int64 | ColumnType::Float64) {
                    return Err(EngineError::Invalid(format!("cannot sum {ty} column {c}")));
                }
                Some((i, ty))
            }
            _ => None,
        };
        let (files, pruned): (Vec<&Arc<LiveFile>>, Vec<&Arc<LiveFile>>) =
            state.live.values().partition(|f| bound.may_match(&f.meta.stats));
        let bound = &bound;
        let tasks = files
            .iter()
            .enumerate()
            .map(|(i, f)| Task::new(i as u32, TaskKind::Read, vec![], move |ctx| read_file(ctx, f, bound)))
            .collect();
        let rows: Vec<Row> = self
            .run(statement, None, tasks)?
            .results
            .into_iter()
            .flat_map(|(_, r)| r)
            .collect();
        let mut result = ScanResult {
            columns,
            rows: Vec::new(),
            aggregate: None,
            files_read: files.len(),
            files_pruned: pruned.len(),
        };
        match (&opts.aggregate, sum_column) {
            (Some(Aggregate::Count), _) => result.aggregate = Some(Value::Int(rows.len() as i64)),
            (Some(Aggregate::Sum(_)), Some((i, ty))) => result.aggregate = Some(sum(&rows, i, ty)?),
            _ => {
                result.rows = rows
                    .into_iter()
                    .map(|r| indices.iter().map(|&i| r[i].clone()).collect())
                    .collect();
            }
        }
        Ok(result)
    }

    /// `SUM(column)` over the rows the transaction sees.
    pub fn sum(&mut self, table: &str, column: &str) -> EngineResult<Value> {
        Ok(self.scan(table, &ScanOptions::sum(column))?.aggregate.unwrap_or(Value::Int(0)))
    }

    /// Validates and publishes the transaction's manifests.
    pub fn commit(&mut self) -> EngineResult<CommitOutcome> {
        self.check_active()?;
        let txn_id = self.cat.id();
        for (table, own) in &self.own {
            if own.actions.is_empty() {
                continue;
            }
            self.cat.put(
                Key::manifest(*table, &own.path),
                catalog::Row::Manifest(ManifestsRow {
                    table_id: *table,
                    manifest_file: own.path.clone(),
                    sequence_id: 0,
                    transaction_id: txn_id,
                    commit_wallclock: 0,
                }),
            )?;
        }
        self.discard_staged();
        let info = self.cat.commit()?;
        if !info.manifests.is_empty() {
            self.db.notify(CommitNotice {
                version: info.version,
                tables: tables_of(&info.manifests),
            });
        }
        Ok(CommitOutcome {
            version: info.version,
            manifests: info.manifests,
        })
    }

    pub fn abort(&mut self) {
        if self.cat.status() == TxnStatus::Active {
            self.cat.abort();
            self.discard_staged();
        }
    }

    fn discard_staged(&self) {
        for own in self.own.values() {
            if let Err(e) = self.db.inner.store.discard_staged(&own.path) {
                log::warn!("discarding staged blocks of {}: {e}", own.path);
            }
        }
    }

    /// Captures the transaction so it can be resumed with [`Database::resume`].
    pub fn suspend(self) -> TxnSession {
        TxnSession {
            catalog: self.cat.suspend(),
            guid: self.guid,
            granularity: self.granularity,
            statement: self.statement,
            own: self.own.into_iter().collect(),
        }
    }
}

fn write_rows(ctx: &mut TaskCtx<'_>, path: &ObjectPath, schema: &Schema, rows: &[Row], stamp: u64) -> Result<u64, TaskError> {
    let (bytes, meta) = encode_data_file(path, schema, rows, stamp)?;
    put_if_absent_or_same(ctx.store(), path, &bytes)?;
    ctx.stage(&encode_action_block(&[ManifestAction::AddDataFile { meta }]))?;
    Ok(rows.len() as u64)
}

fn read_file(ctx: &mut TaskCtx<'_>, file: &LiveFile, bound: &BoundPredicate) -> Result<Vec<Row>, TaskError> {
    let rows = read_data_file(ctx.store(), &file.meta.path, None, file.dv.as_ref().map(|d| &d.vector))?;
    Ok(rows.into_iter().filter(|r| bound.matches(r)).collect())
}

/// Masks rows of one file matching `bound`. Returns the count and, for
/// updates, the new row versions.
fn mask_file(
    ctx: &mut TaskCtx<'_>,
    file: &LiveFile,
    bound: &BoundPredicate,
    dv_path: &ObjectPath,
    set: Option<&[(usize, Value)]>,
) -> Result<(u64, Vec<Row>), TaskError> {
    let path = &file.meta.path;
    let decoded = decode_data_file(path, &ctx.store().get_object(path)?)?;
    let existing: BTreeSet<u64> = file.dv.as_ref().map(|d| d.vector.ordinals().clone()).unwrap_or_default();
    let mut hits = Vec::new();
    let mut updated = Vec::new();
    for (i, row) in decoded.rows.into_iter().enumerate() {
        let ordinal = i as u64;
        if existing.contains(&ordinal) || !bound.matches(&row) {
            continue;
        }
        hits.push(ordinal);
        if let Some(set) = set {
            let mut row = row;
            for (c, v) in set {
                row[*c] = v.clone();
            }
            updated.push(row);
        }
    }
    if hits.is_empty() {
        return Ok((0, updated));
    }
    let row_count = file.meta.row_count;
    let mut actions = Vec::new();
    if existing.len() + hits.len() == row_count as usize {
        actions.push(ManifestAction::RemoveDataFile { path: path.clone() });
    } else {
        if let Some(old) = &file.dv {
            actions.push(ManifestAction::RemoveDeleteVector {
                path: old.path.clone(),
                target: path.clone(),
            });
        }
        let vector = DeleteVector::new(path.clone(), row_count, existing.into_iter().chain(hits.iter().copied()))?;
        let bytes = encode_delete_vector(&vector);
        put_if_absent_or_same(ctx.store(), dv_path, &bytes)?;
        actions.push(ManifestAction::AddDeleteVector {
            dv: DeleteVectorFile {
                path: dv_path.clone(),
                size_bytes: bytes.len() as u64,
                vector,
            },
        });
    }
    ctx.stage(&encode_action_block(&actions))?;
    Ok((hits.len() as u64, updated))
}

/// Splits rows into chunks of `size`, folding a short tail into the previous chunk.
fn chunk_rows(rows: Vec<Row>, size: usize) -> Vec<Vec<Row>> {
    let mut chunks: Vec<Vec<Row>> = Vec::new();
    let mut iter = rows.into_iter().peekable();
    while iter.peek().is_some() {
        chunks.push(iter.by_ref().take(size).collect());
    }
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < size) {
        let tail = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(tail);
    }
    chunks
}

fn sum(rows: &[Row], column: usize, ty: ColumnType) -> EngineResult<Value> {
    match ty {
        ColumnType::Int64 => rows
            .iter()
            .try_fold(0i64, |acc, r| match &r[column] {
                Value::Int(v) => acc.checked_add(*v),
                _ => Some(acc),
            })
            .map(Value::Int)
            .ok_or_else(|| EngineError::Invalid("integer overflow in sum".into())),
        _ => Ok(Value::Float(
            rows.iter().filter_map(|r| r[column].as_f64()).sum(),
        )),
    }
}
