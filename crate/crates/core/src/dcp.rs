//! Simulated distributed computation platform.
//!
//! A statement is split into tasks over disjoint cells and run on a fixed
//! set of worker slots. Write tasks stage their share of the transaction
//! manifest as blocks; the coordinator collects the block ids of successful
//! attempts in task order. Failed attempts are retried and whatever they
//! staged is simply never listed, so it disappears at the next commit.

use std::collections::{BTreeMap, VecDeque};
use std::hash::Hasher;
use std::sync::atomic::{AtomicU64, Ordering};

use fnv::FnvHasher;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::TableDef;
use crate::datafile::{FileError, Row};
use crate::object_store::{BlockId, ObjectPath, ObjectStore, StoreError};

/// 64-bit FNV-1a of `bytes`.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Unit of data-to-compute assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub partition: u32,
    pub distribution: u32,
}

/// Column positions used for bucketing and in-bucket ordering.
#[derive(Clone, Debug)]
pub struct Layout {
    hash_columns: Vec<usize>,
    sort_columns: Vec<usize>,
    buckets: u32,
}

impl Layout {
    pub fn of(def: &TableDef) -> Result<Self, FileError> {
        let hash_columns = if def.distribution_key.is_empty() {
            vec![0]
        } else {
            def.distribution_key
                .iter()
                .map(|c| def.schema.index_of(c))
                .collect::<Result<_, _>>()?
        };
        let sort_columns = def
            .partition_key
            .iter()
            .map(|c| def.schema.index_of(c))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            hash_columns,
            sort_columns,
            buckets: def.distribution_count.max(1),
        })
    }

    /// d(r): the bucket a row belongs to.
    pub fn distribution(&self, row: &Row) -> u32 {
        let mut key = Vec::new();
        for &c in &self.hash_columns {
            row[c].canonical_bytes(&mut key);
        }
        (stable_hash(&key) % u64::from(self.buckets)) as u32
    }
}

/// Groups rows by bucket, keeping input order within a bucket unless the
/// table has a partition key, in which case each bucket is sorted by it.
pub fn distribute(rows: Vec<Row>, layout: &Layout) -> BTreeMap<u32, Vec<Row>> {
    let mut buckets: BTreeMap<u32, Vec<Row>> = BTreeMap::new();
    for row in rows {
        buckets.entry(layout.distribution(&row)).or_default().push(row);
    }
    if !layout.sort_columns.is_empty() {
        for rows in buckets.values_mut() {
            rows.sort_by(|a, b| {
                layout
                    .sort_columns
                    .iter()
                    .map(|&c| a[c].cmp(&b[c]))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
        }
    }
    buckets
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultPoint {
    /// Task dies before uploading its block.
    BeforeStage,
    /// Task dies halfway through the upload, leaving a truncated block.
    MidStage,
    /// Block fully staged, but the task dies before reporting it.
    AfterStage,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRule {
    pub task: u32,
    pub attempt: u32,
    pub point: FaultPoint,
    /// Restricts the rule to one statement number; every statement otherwise.
    #[serde(default)]
    pub statement: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FaultSchedule {
    pub rules: Vec<FaultRule>,
}

impl FaultSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    /// A seeded schedule in which every task still succeeds within
    /// `max_attempts`.
    pub fn random(seed: u64, tasks: u32, max_attempts: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = [FaultPoint::BeforeStage, FaultPoint::MidStage, FaultPoint::AfterStage];
        let mut rules = Vec::new();
        for task in 0..tasks {
            if max_attempts < 2 || !rng.gen_bool(0.5) {
                continue;
            }
            let failures = rng.gen_range(1..max_attempts);
            for attempt in 1..=failures {
                rules.push(FaultRule {
                    task,
                    attempt,
                    point: points[rng.gen_range(0..points.len())],
                    statement: None,
                });
            }
        }
        Self { rules }
    }

    pub fn fires(&self, statement: u64, task: u32, attempt: u32, point: FaultPoint) -> bool {
        self.rules.iter().any(|r| {
            r.task == task && r.attempt == attempt && r.point == point && r.statement.map_or(true, |s| s == statement)
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DcpConfig {
    pub workers: usize,
    /// Slots reserved for read tasks; the rest run writes.
    pub read_workers: Option<usize>,
    pub max_attempts: u32,
    pub faults: FaultSchedule,
    pub trace: bool,
}

impl Default for DcpConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            read_workers: None,
            max_attempts: 3,
            faults: FaultSchedule::none(),
            trace: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("injected failure at {0:?}")]
    Injected(FaultPoint),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    File(#[from] FileError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Error)]
pub enum DcpError {
    #[error("task {task} failed after {attempts} attempts: {last}")]
    TaskFailed { task: u32, attempts: u32, last: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Read,
    Write,
}

/// Identity of the statement whose tasks are being run.
#[derive(Clone, Copy, Debug)]
pub struct StatementScope<'a> {
    pub store: &'a dyn ObjectStore,
    /// Manifest object blocks are staged against; required for write tasks.
    pub manifest: Option<&'a ObjectPath>,
    /// Per-transaction tag mixed into block ids.
    pub tag: &'a str,
    pub statement: u32,
}

/// Handle a running task attempt uses to stage blocks.
pub struct TaskCtx<'a> {
    scope: StatementScope<'a>,
    statement_no: u64,
    task: u32,
    attempt: u32,
    faults: &'a FaultSchedule,
    rng: ChaCha8Rng,
    blocks: Vec<BlockId>,
}

impl<'a> TaskCtx<'a> {
    pub fn task(&self) -> u32 {
        self.task
    }

    pub fn attempt(&self) -> u32 {
        self.attempt
    }

    pub fn store(&self) -> &'a dyn ObjectStore {
        self.scope.store
    }

    fn fault(&self, point: FaultPoint) -> Result<(), TaskError> {
        if self.faults.fires(self.statement_no, self.task, self.attempt, point) {
            return Err(TaskError::Injected(point));
        }
        Ok(())
    }

    /// Stages `payload` as one block of the statement's manifest.
    pub fn stage(&mut self, payload: &[u8]) -> Result<BlockId, TaskError> {
        let path = self
            .scope
            .manifest
            .ok_or_else(|| TaskError::Other("statement has no manifest to stage into".into()))?;
        self.fault(FaultPoint::BeforeStage)?;
        let block = BlockId::from_rng(&mut self.rng, self.task);
        if self.faults.fires(self.statement_no, self.task, self.attempt, FaultPoint::MidStage) {
            let half = &payload[..payload.len().div_ceil(2)];
            if !half.is_empty() {
                self.scope.store.stage_block(path, &block, half)?;
            }
            return Err(TaskError::Injected(FaultPoint::MidStage));
        }
        self.scope.store.stage_block(path, &block, payload)?;
        self.fault(FaultPoint::AfterStage)?;
        self.blocks.push(block);
        Ok(block)
    }
}

type TaskFn<'a, T> = Box<dyn Fn(&mut TaskCtx<'_>) -> Result<T, TaskError> + Send + Sync + 'a>;

pub struct Task<'a, T> {
    pub id: u32,
    pub kind: TaskKind,
    pub cells: Vec<Cell>,
    pub run: TaskFn<'a, T>,
}

impl<'a, T> Task<'a, T> {
    pub fn new(
        id: u32,
        kind: TaskKind,
        cells: Vec<Cell>,
        run: impl Fn(&mut TaskCtx<'_>) -> Result<T, TaskError> + Send + Sync + 'a,
    ) -> Self {
        Self {
            id,
            kind,
            cells,
            run: Box::new(run),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub statement: u64,
    pub worker: usize,
    pub kind: TaskKind,
    pub task: u32,
    pub attempt: u32,
    pub start: u64,
    pub end: u64,
    pub ok: bool,
}

#[derive(Debug)]
pub struct StatementOutput<T> {
    /// Task results ordered by task id.
    pub results: Vec<(u32, T)>,
    /// Blocks of successful attempts: by task id, then emission order.
    pub blocks: Vec<BlockId>,
    pub attempts: BTreeMap<u32, u32>,
}

/// The worker pool shared by all statements of one engine.
#[derive(Debug)]
pub struct Dcp {
    config: DcpConfig,
    slots: Vec<Mutex<()>>,
    ticks: AtomicU64,
    statements: AtomicU64,
    trace: Mutex<Vec<TraceEvent>>,
}

impl Dcp {
    pub fn new(config: DcpConfig) -> Self {
        let workers = config.workers.max(1);
        Self {
            slots: (0..workers).map(|_| Mutex::new(())).collect(),
            config,
            ticks: AtomicU64::new(0),
            statements: AtomicU64::new(0),
            trace: Mutex::new(Vec::new()),
        }
    }

    pub fn config(&self) -> &DcpConfig {
        &self.config
    }

    pub fn set_faults(&mut self, faults: FaultSchedule) {
        self.config.faults = faults;
    }

    /// Worker slots that run tasks of `kind`.
    pub fn pool(&self, kind: TaskKind) -> std::ops::Range<usize> {
        let n = self.slots.len();
        if n == 1 {
            return 0..1;
        }
        let reads = self.config.read_workers.unwrap_or(n / 2).clamp(1, n - 1);
        match kind {
            TaskKind::Read => 0..reads,
            TaskKind::Write => reads..n,
        }
    }

    pub fn trace(&self) -> Vec<TraceEvent> {
        self.trace.lock().clone()
    }

    pub fn clear_trace(&self) {
        self.trace.lock().clear();
    }

    /// Runs every task to success (retrying failed attempts) and aggregates
    /// the staged block ids.
    pub fn execute<T: Send>(&self, scope: StatementScope<'_>, tasks: Vec<Task<'_, T>>) -> Result<StatementOutput<T>, DcpError> {
        let statement_no = self.statements.fetch_add(1, Ordering::SeqCst) + 1;
        if tasks.is_empty() {
            return Ok(StatementOutput {
                results: Vec::new(),
                blocks: Vec::new(),
                attempts: BTreeMap::new(),
            });
        }
        let mut queues: BTreeMap<TaskKind, VecDeque<&Task<'_, T>>> = BTreeMap::new();
        for t in &tasks {
            queues.entry(t.kind).or_default().push_back(t);
        }
        let done: Mutex<BTreeMap<u32, Result<(T, Vec<BlockId>, u32), DcpError>>> = Mutex::new(BTreeMap::new());
        let queues: Vec<(std::ops::Range<usize>, Mutex<VecDeque<&Task<'_, T>>>)> = queues
            .into_iter()
            .map(|(kind, q)| (self.pool(kind), Mutex::new(q)))
            .collect();
        std::thread::scope(|s| {
            for (pool, queue) in &queues {
                let width = pool.len().min(queue.lock().len());
                for worker in pool.clone().take(width) {
                    let done = &done;
                    s.spawn(move || loop {
                        let Some(task) = queue.lock().pop_front() else {
                            break;
                        };
                        let outcome = self.run_task(scope, statement_no, worker, task);
                        done.lock().insert(task.id, outcome);
                    });
                }
            }
        });
        let mut results = Vec::with_capacity(tasks.len());
        let mut blocks = Vec::new();
        let mut attempts = BTreeMap::new();
        for (id, outcome) in done.into_inner() {
            let (value, task_blocks, n) = outcome?;
            results.push((id, value));
            blocks.extend(task_blocks);
            attempts.insert(id, n);
        }
        Ok(StatementOutput {
            results,
            blocks,
            attempts,
        })
    }

    fn run_task<T>(
        &self,
        scope: StatementScope<'_>,
        statement_no: u64,
        worker: usize,
        task: &Task<'_, T>,
    ) -> Result<(T, Vec<BlockId>, u32), DcpError> {
        let max = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max {
            let _slot = self.slots[worker].lock();
            let start = self.ticks.fetch_add(1, Ordering::SeqCst);
            let mut ctx = TaskCtx {
                scope,
                statement_no,
                task: task.id,
                attempt,
                faults: &self.config.faults,
                rng: ChaCha8Rng::seed_from_u64(block_seed(scope.tag, scope.statement, task.id, attempt)),
                blocks: Vec::new(),
            };
            let outcome = (task.run)(&mut ctx);
            let end = self.ticks.fetch_add(1, Ordering::SeqCst);
            if self.config.trace {
                self.trace.lock().push(TraceEvent {
                    statement: statement_no,
                    worker,
                    kind: task.kind,
                    task: task.id,
                    attempt,
                    start,
                    end,
                    ok: outcome.is_ok(),
                });
            }
            match outcome {
                Ok(v) => return Ok((v, ctx.blocks, attempt)),
                Err(e) => {
                    log::debug!("task {} attempt {attempt} failed: {e}", task.id);
                    last = e.to_string();
                }
            }
        }
        Err(DcpError::TaskFailed {
            task: task.id,
            attempts: max,
            last,
        })
    }
}

/// Block id the coordinator uses when it rewrites a manifest after a statement.
pub(crate) fn coordinator_block(tag: &str, statement: u32) -> BlockId {
    let mut rng = ChaCha8Rng::seed_from_u64(block_seed(tag, statement, u32::MAX, 0));
    BlockId::from_rng(&mut rng, u32::MAX)
}

fn block_seed(tag: &str, statement: u32, task: u32, attempt: u32) -> u64 {
    let mut bytes = tag.as_bytes().to_vec();
    bytes.extend_from_slice(&statement.to_le_bytes());
    bytes.extend_from_slice(&task.to_le_bytes());
    bytes.extend_from_slice(&attempt.to_le_bytes());
    stable_hash(&bytes)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;
    use crate::datafile::{ColumnType, Schema, Value};
    use crate::object_store::MemoryStore;

    fn def(buckets: u32) -> TableDef {
        TableDef {
            id: 1,
            name: "t".into(),
            schema: Schema::of(&[("k", ColumnType::Int64), ("v", ColumnType::Utf8)]).unwrap(),
            distribution_count: buckets,
            distribution_key: vec![],
            partition_key: vec![],
        }
    }

    fn rows(n: i64) -> Vec<Row> {
        (0..n).map(|i| vec![Value::Int(i), Value::Str(format!("r{i}"))]).collect()
    }

    #[test]
    fn fnv_matches_published_vectors() {
        assert_eq!(stable_hash(b""), 0xcbf29ce484222325);
        assert_eq!(stable_hash(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(stable_hash(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn one_bucket_keeps_everything_in_order() {
        let layout = Layout::of(&def(1)).unwrap();
        let out = distribute(rows(3), &layout);
        assert_eq!(out.len(), 1);
        assert_eq!(out[&0], rows(3));
    }

    #[test]
    fn buckets_are_stable_and_balanced() {
        let layout = Layout::of(&def(16)).unwrap();
        let input = rows(10_000);
        let out = distribute(input.clone(), &layout);
        let mut again = distribute(input.clone(), &layout);
        assert_eq!(out, std::mem::take(&mut again));
        let mut all: Vec<Row> = out.values().flatten().cloned().collect();
        all.sort();
        assert_eq!(all, input);
        let mean = 10_000.0 / 16.0;
        for (j, bucket) in &out {
            assert!((bucket.len() as f64) < 3.0 * mean);
            for r in bucket {
                let mut key = Vec::new();
                r[0].canonical_bytes(&mut key);
                assert_eq!(stable_hash(&key) % 16, u64::from(*j));
            }
        }
    }

    #[test]
    fn partition_key_sorts_within_buckets() {
        let mut d = def(2);
        d.partition_key = vec!["v".into()];
        let layout = Layout::of(&d).unwrap();
        for bucket in distribute(rows(50), &layout).values() {
            assert!(bucket.windows(2).all(|w| w[0][1] <= w[1][1]));
        }
    }

    fn scope<'a>(store: &'a MemoryStore, path: &'a ObjectPath) -> StatementScope<'a> {
        StatementScope {
            store,
            manifest: Some(path),
            tag: "guid",
            statement: 1,
        }
    }

    fn stage_tasks<'a>(n: u32) -> Vec<Task<'a, u32>> {
        (0..n)
            .map(|i| {
                Task::new(i, TaskKind::Write, vec![Cell { partition: 0, distribution: i }], move |ctx| {
                    ctx.stage(format!("task {i}\n").as_bytes())?;
                    Ok(i)
                })
            })
            .collect()
    }

    fn run(config: DcpConfig, n: u32) -> (Vec<BlockId>, Vec<u8>, Vec<TraceEvent>) {
        let store = MemoryStore::new();
        let path = ObjectPath::parse("ws/1/manifests/x.m").unwrap();
        let dcp = Dcp::new(DcpConfig { trace: true, ..config });
        let out = dcp.execute(scope(&store, &path), stage_tasks(n)).unwrap();
        assert_eq!(out.results.iter().map(|(i, _)| *i).collect::<Vec<_>>(), (0..n).collect::<Vec<_>>());
        store.commit_block_list(&path, &out.blocks).unwrap();
        assert!(store.list_staged("ws/").unwrap().is_empty());
        (out.blocks, store.get_object(&path).unwrap(), dcp.trace())
    }

    #[test]
    fn parallel_run_matches_serial_run() {
        let serial = run(DcpConfig { workers: 1, ..Default::default() }, 4);
        let parallel = run(DcpConfig { workers: 8, ..Default::default() }, 4);
        assert_eq!(serial.0.len(), 4);
        assert_eq!(serial.0, parallel.0);
        assert_eq!(serial.1, b"task 0\ntask 1\ntask 2\ntask 3\n");
        assert_eq!(serial.1, parallel.1);
    }

    #[test]
    fn failed_attempts_are_excluded() {
        let clean = run(DcpConfig::default(), 4);
        for point in [FaultPoint::BeforeStage, FaultPoint::MidStage, FaultPoint::AfterStage] {
            let faults = FaultSchedule {
                rules: vec![FaultRule {
                    task: 2,
                    attempt: 1,
                    point,
                    statement: None,
                }],
            };
            let (blocks, bytes, trace) = run(DcpConfig { faults, ..Default::default() }, 4);
            assert_eq!(bytes, clean.1);
            assert_ne!(blocks[2], clean.0[2]);
            assert_eq!(blocks[..2], clean.0[..2]);
            assert!(trace.iter().any(|e| e.task == 2 && e.attempt == 1 && !e.ok));
        }
    }

    #[test]
    fn permanent_failure_is_reported() {
        let store = MemoryStore::new();
        let path = ObjectPath::parse("ws/1/manifests/x.m").unwrap();
        let faults = FaultSchedule {
            rules: (1..=3)
                .map(|attempt| FaultRule {
                    task: 0,
                    attempt,
                    point: FaultPoint::AfterStage,
                    statement: None,
                })
                .collect(),
        };
        let dcp = Dcp::new(DcpConfig { faults, ..Default::default() });
        let err = dcp.execute(scope(&store, &path), stage_tasks(2)).unwrap_err();
        assert!(matches!(err, DcpError::TaskFailed { task: 0, attempts: 3, .. }));
        assert!(matches!(store.get_object(&path), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn no_tasks_no_blocks() {
        let store = MemoryStore::new();
        let path = ObjectPath::parse("ws/1/manifests/x.m").unwrap();
        let out = Dcp::new(DcpConfig::default())
            .execute::<()>(scope(&store, &path), Vec::new())
            .unwrap();
        assert!(out.blocks.is_empty() && out.results.is_empty());
    }

    fn check_pools(dcp: &Dcp) {
        let trace = dcp.trace();
        let mut by_worker: BTreeMap<usize, Vec<&TraceEvent>> = BTreeMap::new();
        for e in &trace {
            by_worker.entry(e.worker).or_default().push(e);
        }
        for events in by_worker.values() {
            for (i, a) in events.iter().enumerate() {
                for b in &events[i + 1..] {
                    assert!(a.end < b.start || b.end < a.start, "worker ran two tasks at once");
                }
            }
        }
        if dcp.slots.len() > 1 {
            for e in &trace {
                assert!(dcp.pool(e.kind).contains(&e.worker));
            }
        }
    }

    fn mixed_workload(workers: usize) -> Dcp {
        let dcp = Dcp::new(DcpConfig {
            workers,
            trace: true,
            ..Default::default()
        });
        let store = MemoryStore::new();
        std::thread::scope(|s| {
            for stmt in 0..4u32 {
                let dcp = &dcp;
                let store = &store;
                s.spawn(move || {
                    let path = ObjectPath::parse(&format!("ws/1/manifests/{stmt}.m")).unwrap();
                    let kind = if stmt % 2 == 0 { TaskKind::Read } else { TaskKind::Write };
                    let tasks = (0..6)
                        .map(|i| {
                            Task::new(i, kind, vec![], move |ctx| {
                                if kind == TaskKind::Write {
                                    ctx.stage(b"x\n")?;
                                }
                                std::thread::yield_now();
                                Ok(())
                            })
                        })
                        .collect();
                    dcp.execute(scope(store, &path), tasks).unwrap();
                });
            }
        });
        dcp
    }

    #[test]
    fn read_and_write_pools_are_disjoint() {
        let dcp = mixed_workload(4);
        assert_eq!(dcp.pool(TaskKind::Read), 0..2);
        assert_eq!(dcp.pool(TaskKind::Write), 2..4);
        check_pools(&dcp);
        let workers: BTreeSet<(usize, TaskKind)> = dcp.trace().iter().map(|e| (e.worker, e.kind)).collect();
        assert!(workers.iter().all(|(w, k)| (*w < 2) == (*k == TaskKind::Read)));
    }

    #[test]
    fn single_worker_serializes_everything() {
        let dcp = mixed_workload(1);
        check_pools(&dcp);
        assert!(dcp.trace().iter().all(|e| e.worker == 0));
    }

    #[test]
    fn write_only_leaves_read_pool_idle() {
        let dcp = Dcp::new(DcpConfig {
            workers: 4,
            trace: true,
            ..Default::default()
        });
        let store = MemoryStore::new();
        let path = ObjectPath::parse("ws/1/manifests/x.m").unwrap();
        dcp.execute(scope(&store, &path), stage_tasks(8)).unwrap();
        assert!(dcp.trace().iter().all(|e| e.worker >= 2));
    }

    proptest! {
        #[test]
        fn random_schedules_converge_to_the_clean_result(seed in any::<u64>()) {
            let faults = FaultSchedule::random(seed, 6, 3);
            let clean = run(DcpConfig::default(), 6);
            let faulty = run(DcpConfig { faults: faults.clone(), ..Default::default() }, 6);
            prop_assert_eq!(&clean.1, &faulty.1);
            let again = run(DcpConfig { faults, ..Default::default() }, 6);
            prop_assert_eq!(faulty.0, again.0);
        }
    }
}
