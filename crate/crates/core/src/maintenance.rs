//! Background table maintenance: compaction, checkpoints, garbage
//! collection and publishing a Delta-style commit log.

use std::collections::{BTreeMap, BTreeSet};
use std::thread::JoinHandle;

use crossbeam_channel::{select, Sender};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::catalog::{self, CheckpointRow, Isolation, Key, KeyRange, ManifestsRow};
use crate::clock::Millis;
use crate::error::EngineResult;
use crate::manifest::{Checkpoint, LiveFile, TableId, TableState};
use crate::object_store::{ObjectPath, StoreError};
use crate::paths;
use crate::txn::{CommitOutcome, Database, Granularity};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaintenanceConfig {
    pub min_rows_per_file: u64,
    /// Number of small files that makes a table due for compaction.
    pub small_file_trigger: usize,
    pub delete_fraction_trigger: f64,
    /// Manifests since the last checkpoint that make a checkpoint due.
    pub checkpoint_trigger: usize,
    pub retention_ms: Millis,
    /// Whether a [`Scheduler`] should be started with the engine.
    pub auto: bool,
    /// Whether the scheduler also publishes the commit log.
    pub publish: bool,
}

impl Default for MaintenanceConfig {
    fn default() -> Self {
        Self {
            min_rows_per_file: 1000,
            small_file_trigger: 8,
            delete_fraction_trigger: 0.2,
            checkpoint_trigger: 10,
            retention_ms: 7 * 24 * 60 * 60 * 1000,
            auto: false,
            publish: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FileHealth {
    pub path: ObjectPath,
    pub rows: u64,
    pub live_rows: u64,
    pub deleted_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TableHealth {
    pub table_id: TableId,
    pub live_files: usize,
    /// Files whose live rows fall below the minimum.
    pub small_files: usize,
    /// File count by live-row magnitude: key `k` counts files with `10^(k-1) <= rows < 10^k`.
    pub rows_per_file: BTreeMap<u32, usize>,
    pub files: Vec<FileHealth>,
    pub manifests_since_checkpoint: usize,
    pub compaction_due: bool,
    pub checkpoint_due: bool,
}

fn magnitude(rows: u64) -> u32 {
    if rows == 0 {
        0
    } else {
        rows.ilog10() + 1
    }
}

fn file_health(f: &LiveFile) -> FileHealth {
    FileHealth {
        path: f.meta.path.clone(),
        rows: f.meta.row_count,
        live_rows: f.live_rows(),
        deleted_fraction: f.dv.as_ref().map_or(0.0, |d| d.vector.deleted_fraction()),
    }
}

pub fn evaluate_health(
    table_id: TableId,
    state: &TableState,
    manifests_since_checkpoint: usize,
    config: &MaintenanceConfig,
) -> TableHealth {
    let files: Vec<FileHealth> = state.live.values().map(|f| file_health(f)).collect();
    let small_files = files.iter().filter(|f| f.live_rows < config.min_rows_per_file).count();
    let mut rows_per_file = BTreeMap::new();
    for f in &files {
        *rows_per_file.entry(magnitude(f.live_rows)).or_insert(0) += 1;
    }
    let fragmented = files.iter().any(|f| f.deleted_fraction >= config.delete_fraction_trigger);
    TableHealth {
        table_id,
        live_files: files.len(),
        small_files,
        rows_per_file,
        compaction_due: small_files >= config.small_file_trigger || fragmented,
        checkpoint_due: manifests_since_checkpoint >= config.checkpoint_trigger,
        manifests_since_checkpoint,
        files,
    }
}

pub fn health(db: &Database, table: &str) -> EngineResult<TableHealth> {
    let def = db.table(table)?;
    let rows = db.manifests(def.id);
    let last = db.checkpoints(def.id).iter().map(|c| c.upto_sequence).max().unwrap_or(0);
    let since = rows.iter().filter(|r| r.sequence_id > last).count();
    let state = db.committed_state(def.id)?;
    Ok(evaluate_health(def.id, &state, since, &db.config().maintenance))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompactionReport {
    pub removed: Vec<ObjectPath>,
    pub written: usize,
    /// Absent when nothing needed rewriting.
    #[serde(skip)]
    pub outcome: Option<CommitOutcome>,
}

/// Files a compaction of `state` would rewrite, in path order.
pub fn compaction_candidates(state: &TableState, config: &MaintenanceConfig) -> Vec<ObjectPath> {
    let poor = |f: &LiveFile| {
        f.live_rows() < config.min_rows_per_file
            || f.dv.as_ref().is_some_and(|d| d.vector.deleted_fraction() >= config.delete_fraction_trigger)
    };
    let mut selected: Vec<&LiveFile> = state.live.values().map(|f| &**f).filter(|f| poor(f)).collect();
    let mut total: u64 = selected.iter().map(|f| f.live_rows()).sum();
    if !selected.is_empty() && total < config.min_rows_per_file {
        let mut healthy: Vec<&LiveFile> = state.live.values().map(|f| &**f).filter(|f| !poor(f)).collect();
        healthy.sort_by_key(|f| (f.live_rows(), f.meta.path.clone()));
        for f in healthy {
            if total >= config.min_rows_per_file {
                break;
            }
            total += f.live_rows();
            selected.push(f);
        }
    }
    if selected.len() < 2 && !selected.iter().any(|f| f.dv.is_some()) {
        return Vec::new();
    }
    let mut paths: Vec<ObjectPath> = selected.into_iter().map(|f| f.meta.path.clone()).collect();
    paths.sort();
    paths
}

/// Rewrites small or heavily deleted files as an ordinary transaction that
/// conflicts only with writers of the same files.
pub fn compact(db: &Database, table: &str) -> EngineResult<CompactionReport> {
    let config = &db.config().maintenance;
    let mut txn = db.begin_with(Isolation::Snapshot, Granularity::File);
    let state = txn.table_state(table)?;
    let removed = compaction_candidates(&state, config);
    if removed.is_empty() {
        txn.commit()?;
        return Ok(CompactionReport {
            removed,
            written: 0,
            outcome: None,
        });
    }
    let written = txn.rewrite_files(table, &removed, config.min_rows_per_file as usize)?;
    let outcome = txn.commit()?;
    Ok(CompactionReport {
        removed,
        written,
        outcome: Some(outcome),
    })
}

/// Materializes the latest committed state of `table`. Concurrent writers
/// are unaffected; a concurrent checkpoint of the same point wins silently.
pub fn checkpoint(db: &Database, table: &str) -> EngineResult<CheckpointRow> {
    let def = db.table(table)?;
    let mut cat = db.catalog().begin(Isolation::Snapshot);
    let mut rows: Vec<ManifestsRow> = cat
        .scan(&KeyRange::Manifests(def.id))?
        .into_iter()
        .filter_map(|(_, r)| r.as_manifest().cloned())
        .collect();
    rows.sort_by_key(|r| r.sequence_id);
    let upto = rows.last().map_or(0, |r| r.sequence_id);
    let key = Key::Checkpoint { table: def.id, upto };
    if let Some(existing) = cat.get(&key)?.and_then(|r| r.as_checkpoint().cloned()) {
        return Ok(existing);
    }
    let checkpoints: Vec<CheckpointRow> = cat
        .scan(&KeyRange::Checkpoints(def.id))?
        .into_iter()
        .filter_map(|(_, r)| r.as_checkpoint().cloned())
        .collect();
    let state = db.state_of(def.id, &rows, &checkpoints)?;
    let path = paths::checkpoint(&db.config().workspace, def.id, upto);
    let body = Checkpoint {
        table: def.id,
        upto_sequence: upto,
        created_txn_ts: cat.begin_ts(),
        state: (*state).clone(),
    };
    match db.store().put_object(&path, &body.encode()) {
        Ok(_) | Err(StoreError::AlreadyExists(_)) => {}
        Err(e) => return Err(e.into()),
    }
    let row = CheckpointRow {
        table_id: def.id,
        upto_sequence: upto,
        path,
        created_wallclock: db.now_ms(),
    };
    cat.put(key.clone(), catalog::Row::Checkpoint(row.clone()))?;
    match cat.commit() {
        Ok(_) => Ok(row),
        Err(e) if e.is_retryable() => db
            .catalog()
            .get_latest(&key)
            .and_then(|r| r.as_checkpoint().cloned())
            .ok_or_else(|| e.into()),
        Err(e) => Err(e.into()),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct GcReport {
    /// Objects created at or after this begin timestamp are never collected.
    pub threshold: u64,
    pub active: usize,
    /// Logically removed files past retention that were deleted.
    pub deleted_inactive: Vec<ObjectPath>,
    /// Unreferenced objects older than every running transaction.
    pub deleted_orphans: Vec<ObjectPath>,
    /// Unreferenced objects kept because a running transaction may own them.
    pub retained_orphans: Vec<ObjectPath>,
    pub deleted_checkpoints: Vec<ObjectPath>,
    /// Objects whose uncommitted staged blocks were dropped.
    pub discarded_staged: Vec<ObjectPath>,
}

/// Deletes what no table lineage can reach any more.
///
/// Every table is processed in one pass, so a file removed from one table
/// but still referenced by a clone stays. Removed files are kept while a
/// time-travel read within retention could reach them.
pub fn garbage_collect(db: &Database) -> EngineResult<GcReport> {
    let _only_one = db.inner().gc_lock.lock();
    let mut cat = db.catalog().begin(Isolation::Snapshot);
    let threshold = db.catalog().oldest_active().unwrap_or(cat.begin_ts()).min(cat.begin_ts());
    let now = db.now_ms();
    let retention = db.config().maintenance.retention_ms;
    let ws = db.config().workspace.clone();
    let store = db.store().clone();

    let mut by_table: BTreeMap<TableId, Vec<ManifestsRow>> = BTreeMap::new();
    for (_, row) in cat.scan(&KeyRange::AllManifests)? {
        if let Some(m) = row.as_manifest() {
            by_table.entry(m.table_id).or_default().push(m.clone());
        }
    }
    for (_, row) in cat.scan(&KeyRange::Tables)? {
        if let Some(def) = row.as_table() {
            by_table.entry(def.id).or_default();
        }
    }

    let mut active: BTreeSet<ObjectPath> = BTreeSet::new();
    let mut expired: BTreeSet<ObjectPath> = BTreeSet::new();
    let mut manifests: BTreeSet<ObjectPath> = BTreeSet::new();
    let mut checkpoint_objects: BTreeSet<ObjectPath> = BTreeSet::new();
    let mut superseded: Vec<CheckpointRow> = Vec::new();
    for (table, mut rows) in by_table {
        rows.sort_by_key(|r| r.sequence_id);
        let mut checkpoints: Vec<CheckpointRow> = cat
            .scan(&KeyRange::Checkpoints(table))?
            .into_iter()
            .filter_map(|(_, r)| r.as_checkpoint().cloned())
            .collect();
        checkpoints.sort_by_key(|c| c.upto_sequence);
        let state = db.state_of(table, &rows, &checkpoints)?;
        let committed_at: BTreeMap<u64, Millis> = rows.iter().map(|r| (r.sequence_id, r.commit_wallclock)).collect();
        active.extend(state.referenced_files().cloned());
        for (path, seq) in &state.removed {
            let at = committed_at.get(seq).copied().unwrap_or(0);
            if at.saturating_add(retention) >= now {
                active.insert(path.clone());
            } else {
                expired.insert(path.clone());
            }
        }
        manifests.extend(rows.into_iter().map(|r| r.manifest_file));
        for pair in checkpoints.windows(2) {
            if pair[1].created_wallclock.saturating_add(retention) < now {
                superseded.push(pair[0].clone());
            } else {
                checkpoint_objects.insert(pair[0].path.clone());
            }
        }
        if let Some(last) = checkpoints.last() {
            checkpoint_objects.insert(last.path.clone());
        }
    }
    expired.retain(|p| !active.contains(p));

    let mut report = GcReport {
        threshold,
        active: active.len(),
        ..GcReport::default()
    };
    if !superseded.is_empty() {
        for c in &superseded {
            cat.delete(Key::Checkpoint {
                table: c.table_id,
                upto: c.upto_sequence,
            })?;
        }
        match cat.commit() {
            Ok(_) => {
                for c in superseded {
                    store.delete_object(&c.path)?;
                    report.deleted_checkpoints.push(c.path);
                }
            }
            Err(e) if e.is_retryable() => {
                checkpoint_objects.extend(superseded.into_iter().map(|c| c.path));
            }
            Err(e) => return Err(e.into()),
        }
    }

    let publish = format!("/{}/", paths::PUBLISH_DIR);
    for path in store.list_prefix(&format!("{ws}/"))? {
        if active.contains(&path) || manifests.contains(&path) || checkpoint_objects.contains(&path) {
            continue;
        }
        if path.as_str().contains(&publish) {
            continue;
        }
        if expired.contains(&path) {
            store.delete_object(&path)?;
            report.deleted_inactive.push(path);
            continue;
        }
        let stamp = match paths::kind_of(&path) {
            Some(paths::CHECKPOINT_DIR) => store
                .get_object(&path)
                .ok()
                .and_then(|b| Checkpoint::decode(&b).ok())
                .map_or(0, |c| c.created_txn_ts),
            _ => match paths::creation_stamp(&path) {
                Some(s) => s,
                None => continue,
            },
        };
        if stamp < threshold {
            store.delete_object(&path)?;
            report.deleted_orphans.push(path);
        } else {
            report.retained_orphans.push(path);
        }
    }
    for (path, _) in store.list_staged(&format!("{ws}/"))? {
        if paths::creation_stamp(&path).is_some_and(|s| s < threshold) {
            store.discard_staged(&path)?;
            report.discarded_staged.push(path);
        }
    }
    cat.abort();
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PublishReport {
    pub written: Vec<ObjectPath>,
}

fn file_record(f: &LiveFile) -> serde_json::Value {
    let mut add = json!({
        "path": f.meta.path.as_str(),
        "size": f.meta.size_bytes,
        "rows": f.meta.row_count,
    });
    if let Some(dv) = &f.dv {
        add["deletionVector"] = json!({
            "path": dv.path.as_str(),
            "cardinality": dv.vector.len(),
        });
    }
    add
}

/// Commit-log entry turning `before` into `after`. A file whose delete
/// vector changed is removed and added again.
fn log_entry(row: &ManifestsRow, before: &TableState, after: &TableState) -> String {
    let mut lines = vec![json!({
        "commitInfo": {
            "sequence": row.sequence_id,
            "timestamp": row.commit_wallclock,
            "transaction": row.transaction_id,
            "manifest": row.manifest_file.as_str(),
        }
    })];
    for (path, f) in &before.live {
        if after.live.get(path) != Some(f) {
            lines.push(json!({ "remove": { "path": path.as_str() } }));
        }
    }
    for (path, f) in &after.live {
        if before.live.get(path) != Some(f) {
            lines.push(json!({ "add": file_record(f) }));
        }
    }
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    out
}

fn published_sequence(path: &ObjectPath) -> Option<u64> {
    path.file_name().strip_suffix(".json")?.parse().ok()
}

/// Appends a log file for every commit of `table` not yet published.
/// Data files are referenced in place, never copied.
pub fn publish(db: &Database, table: &str) -> EngineResult<PublishReport> {
    let def = db.table(table)?;
    let ws = &db.config().workspace;
    let store = db.store();
    let done = store
        .list_prefix(&paths::publish_log_dir(ws, def.id))?
        .iter()
        .filter_map(published_sequence)
        .max()
        .unwrap_or(0);
    let rows = db.manifests(def.id);
    let checkpoints = db.checkpoints(def.id);
    let mut report = PublishReport::default();
    for (i, row) in rows.iter().enumerate().filter(|(_, r)| r.sequence_id > done) {
        let before = db.state_of(def.id, &rows[..i], &checkpoints)?;
        let after = db.state_of(def.id, &rows[..=i], &checkpoints)?;
        let path = paths::publish_log(ws, def.id, row.sequence_id);
        match store.put_object(&path, log_entry(row, &before, &after).as_bytes()) {
            Ok(_) => report.written.push(path),
            Err(StoreError::AlreadyExists(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(report)
}

/// Runs maintenance after commits, fed by the engine's commit notices.
pub struct Scheduler {
    stop: Sender<()>,
    handle: Option<JoinHandle<()>>,
}

impl Scheduler {
    pub fn start(db: Database) -> Self {
        let notices = db.subscribe();
        let (stop, stopped) = crossbeam_channel::bounded::<()>(1);
        let handle = std::thread::spawn(move || loop {
            select! {
                recv(stopped) -> _ => break,
                recv(notices) -> n => match n {
                    Ok(n) => {
                        for table in n.tables {
                            if let Err(e) = run_due(&db, table) {
                                log::warn!("maintenance of table {table}: {e}");
                            }
                        }
                    }
                    Err(_) => break,
                },
            }
        });
        Self {
            stop,
            handle: Some(handle),
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        let _ = self.stop.send(());
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Scheduler {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Runs whatever maintenance the table's health calls for.
pub fn run_due(db: &Database, table: TableId) -> EngineResult<()> {
    let Some(def) = db.tables().into_iter().find(|d| d.id == table) else {
        return Ok(());
    };
    let h = health(db, &def.name)?;
    if h.compaction_due {
        match compact(db, &def.name) {
            Err(e) if e.is_conflict() => log::info!("compaction of {} lost to a writer", def.name),
            other => {
                other?;
            }
        }
    }
    if h.checkpoint_due {
        checkpoint(db, &def.name)?;
    }
    if db.config().maintenance.publish {
        publish(db, &def.name)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
