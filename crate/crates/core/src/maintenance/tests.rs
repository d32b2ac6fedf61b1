use std::sync::Arc;
use std::time::Duration;

use super::*;
use crate::clock::ManualClock;
use crate::config::EngineConfig;
use crate::datafile::{ColumnType, Row, Schema, Value};
use crate::txn::{AsOf, CmpOp, Predicate, ScanOptions, TableSpec};

fn row(c1: &str, c2: i64) -> Row {
    vec![Value::from(c1), Value::Int(c2)]
}

fn setup(edit: impl FnOnce(&mut MaintenanceConfig)) -> (Database, Arc<ManualClock>) {
    let mut config = EngineConfig::default();
    edit(&mut config.maintenance);
    let clock = Arc::new(ManualClock::new(1_000));
    let db = Database::in_memory_with_clock(config, clock.clone());
    let schema = Schema::of(&[("C1", ColumnType::Utf8), ("C2", ColumnType::Int64)]).unwrap();
    db.create_table(TableSpec::new("T1", schema)).unwrap();
    (db, clock)
}

fn insert(db: &Database, table: &str, rows: Vec<Row>) {
    let mut t = db.begin();
    t.insert(table, rows).unwrap();
    t.commit().unwrap();
}

fn delete(db: &Database, table: &str, c2: i64) {
    let mut t = db.begin();
    t.delete(table, &Predicate::term("C2", CmpOp::Eq, c2)).unwrap();
    t.commit().unwrap();
}

fn scan(db: &Database, table: &str) -> Vec<Row> {
    let mut rows = db.begin().scan(table, &ScanOptions::all()).unwrap().rows;
    rows.sort();
    rows
}

#[test]
fn health_thresholds() {
    let (db, _) = setup(|_| {});
    insert(&db, "T1", vec![row("a", 1)]);
    let h = health(&db, "T1").unwrap();
    assert!(!h.compaction_due && !h.checkpoint_due);
    assert_eq!(h.manifests_since_checkpoint, 1);
    for i in 0..9 {
        insert(&db, "T1", (0..5).map(|j| row("x", i * 10 + j)).collect());
    }
    let h = health(&db, "T1").unwrap();
    assert_eq!((h.live_files, h.small_files), (10, 10));
    assert!(h.compaction_due);
    assert!(h.checkpoint_due);
    assert_eq!(h.rows_per_file, BTreeMap::from([(1, 10)]));
    checkpoint(&db, "T1").unwrap();
    assert_eq!(health(&db, "T1").unwrap().manifests_since_checkpoint, 0);
}

#[test]
fn deleted_fraction_triggers_compaction() {
    let (db, _) = setup(|c| c.min_rows_per_file = 2);
    insert(&db, "T1", (0..10).map(|i| row("x", i)).collect());
    delete(&db, "T1", 1);
    assert!(!health(&db, "T1").unwrap().compaction_due);
    delete(&db, "T1", 2);
    let h = health(&db, "T1").unwrap();
    assert!((h.files[0].deleted_fraction - 0.2).abs() < 1e-9);
    assert!(h.compaction_due);
}

#[test]
fn compaction_preserves_rows_and_drops_vectors() {
    let (db, _) = setup(|c| c.min_rows_per_file = 4);
    insert(&db, "T1", (0..5).map(|i| row("a", i)).collect());
    insert(&db, "T1", (5..10).map(|i| row("b", i)).collect());
    delete(&db, "T1", 1);
    delete(&db, "T1", 7);
    let before = scan(&db, "T1");
    let report = compact(&db, "T1").unwrap();
    assert_eq!(report.removed.len(), 2);
    assert_eq!(report.written, 2);
    let state = db.committed_state(1).unwrap();
    assert!(state.live.values().all(|f| f.dv.is_none()));
    assert_eq!(scan(&db, "T1"), before);
    let h = health(&db, "T1").unwrap();
    assert_eq!(h.small_files, 0);
    assert!(h.files.iter().all(|f| f.deleted_fraction == 0.0));
    for old in &report.removed {
        assert!(db.store().exists(old).unwrap(), "compaction only removes logically");
    }
}

#[test]
fn compaction_without_candidates_commits_nothing() {
    let (db, _) = setup(|c| c.min_rows_per_file = 2);
    insert(&db, "T1", vec![row("a", 1), row("b", 2)]);
    let report = compact(&db, "T1").unwrap();
    assert!(report.outcome.is_none());
    assert_eq!(db.manifests(1).len(), 1);
}

#[test]
fn compaction_races_a_user_delete() {
    for user_first in [true, false] {
        let (db, _) = setup(|c| c.min_rows_per_file = 100);
        insert(&db, "T1", vec![row("a", 1), row("b", 2)]);
        insert(&db, "T1", vec![row("c", 3)]);
        let mut user = db.begin();
        user.delete("T1", &Predicate::term("C2", CmpOp::Eq, 1)).unwrap();
        let mut sto = db.begin_with(Isolation::Snapshot, Granularity::File);
        let files = compaction_candidates(&sto.table_state("T1").unwrap(), &db.config().maintenance);
        assert_eq!(files.len(), 2);
        sto.rewrite_files("T1", &files, 100).unwrap();
        let (first, second) = if user_first { (&mut user, &mut sto) } else { (&mut sto, &mut user) };
        first.commit().unwrap();
        assert!(second.commit().unwrap_err().is_conflict());
        let expected = if user_first { 2 } else { 3 };
        assert_eq!(scan(&db, "T1").len(), expected);
    }
}

#[test]
fn checkpoints_are_transparent() {
    let (db, _) = setup(|_| {});
    let empty = checkpoint(&db, "T1").unwrap();
    assert_eq!(empty.upto_sequence, 0);
    let cp = Checkpoint::decode(&db.store().get_object(&empty.path).unwrap()).unwrap();
    assert!(cp.state.live.is_empty());

    insert(&db, "T1", vec![row("a", 1), row("b", 2)]);
    delete(&db, "T1", 1);
    let before = scan(&db, "T1");
    let row1 = checkpoint(&db, "T1").unwrap();
    assert_eq!(row1.upto_sequence, 2);
    assert_eq!(checkpoint(&db, "T1").unwrap(), row1);
    insert(&db, "T1", vec![row("c", 3)]);

    let fresh = Database::new(db.store().clone(), db.catalog().clone(), db.config().clone());
    let mut expected = before;
    expected.push(row("c", 3));
    assert_eq!(scan(&fresh, "T1"), expected);
}

#[test]
fn checkpoint_does_not_block_writers() {
    let (db, _) = setup(|_| {});
    insert(&db, "T1", vec![row("a", 1)]);
    let mut w = db.begin();
    w.delete("T1", &Predicate::all()).unwrap();
    checkpoint(&db, "T1").unwrap();
    w.commit().unwrap();
    assert!(scan(&db, "T1").is_empty());
}

#[test]
fn gc_deletes_expired_files_but_keeps_clone_references() {
    let (db, clock) = setup(|c| c.retention_ms = 1_000);
    insert(&db, "T1", vec![row("a", 1)]);
    insert(&db, "T1", vec![row("b", 2)]);
    let files: Vec<ObjectPath> = db.committed_state(1).unwrap().live.keys().cloned().collect();
    db.clone_table("T1", "C", None).unwrap();
    let mut t = db.begin();
    t.delete("T1", &Predicate::all()).unwrap();
    t.commit().unwrap();

    let report = garbage_collect(&db).unwrap();
    assert!(report.deleted_inactive.is_empty());
    clock.advance(5_000);
    let report = garbage_collect(&db).unwrap();
    assert!(report.deleted_inactive.is_empty(), "{report:?}");
    for f in &files {
        assert!(db.store().exists(f).unwrap());
    }
    db.drop_table("C").unwrap();
    let report = garbage_collect(&db).unwrap();
    assert_eq!(report.deleted_inactive, files);
    assert!(scan(&db, "T1").is_empty());
}

#[test]
fn gc_keeps_files_reachable_by_time_travel() {
    let (db, clock) = setup(|c| c.retention_ms = 10_000);
    insert(&db, "T1", vec![row("a", 1)]);
    clock.advance(1_000);
    delete(&db, "T1", 1);
    clock.advance(5_000);
    garbage_collect(&db).unwrap();
    let mut r = db.begin();
    let sum = r.scan("T1", &ScanOptions::sum("C2").as_of(AsOf::Time(1_000))).unwrap();
    assert_eq!(sum.aggregate, Some(Value::Int(1)));
    clock.advance(10_000);
    let report = garbage_collect(&db).unwrap();
    assert_eq!(report.deleted_inactive.len(), 1);
    let mut r = db.begin();
    assert!(r.scan("T1", &ScanOptions::sum("C2").as_of(AsOf::Time(1_000))).is_err());
}

#[test]
fn gc_orphans_respect_running_transactions() {
    let (db, _) = setup(|c| c.retention_ms = 0);
    let mut aborted = db.begin();
    aborted.insert("T1", vec![row("a", 1)]).unwrap();
    aborted.abort();
    let mut running = db.begin();
    running.insert("T1", vec![row("b", 2)]).unwrap();
    let report = garbage_collect(&db).unwrap();
    assert!(report.deleted_orphans.iter().any(|p| p.as_str().contains(aborted.guid())));
    assert!(report.retained_orphans.iter().any(|p| p.as_str().contains(running.guid())));
    assert!(report.deleted_orphans.iter().all(|p| !p.as_str().contains(running.guid())));
    running.commit().unwrap();
    assert_eq!(scan(&db, "T1"), vec![row("b", 2)]);
}

#[test]
fn gc_discards_staged_blocks_of_dead_transactions() {
    let (db, _) = setup(|_| {});
    let mut t = db.begin();
    t.insert("T1", vec![row("a", 1)]).unwrap();
    let path = paths::manifest(&db.config().workspace, 1, t.guid());
    db.store()
        .stage_block(&path, &crate::object_store::BlockId { id: 9, origin: 0 }, b"junk")
        .unwrap();
    drop(t);
    let report = garbage_collect(&db).unwrap();
    assert_eq!(report.discarded_staged, vec![path.clone()]);
    assert!(db.store().list_staged("ws/").unwrap().is_empty());
}

#[test]
fn superseded_checkpoints_expire() {
    let (db, clock) = setup(|c| c.retention_ms = 1_000);
    insert(&db, "T1", vec![row("a", 1)]);
    let first = checkpoint(&db, "T1").unwrap();
    insert(&db, "T1", vec![row("b", 2)]);
    checkpoint(&db, "T1").unwrap();
    assert!(garbage_collect(&db).unwrap().deleted_checkpoints.is_empty());
    clock.advance(2_000);
    let report = garbage_collect(&db).unwrap();
    assert_eq!(report.deleted_checkpoints, vec![first.path.clone()]);
    assert!(!db.store().exists(&first.path).unwrap());
    assert_eq!(db.checkpoints(1).len(), 1);
    assert_eq!(scan(&db, "T1").len(), 2);
}

fn published(db: &Database, table: TableId) -> BTreeSet<String> {
    let mut live = BTreeSet::new();
    for path in db.store().list_prefix(&paths::publish_log_dir("ws", table)).unwrap() {
        let text = String::from_utf8(db.store().get_object(&path).unwrap()).unwrap();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            if let Some(r) = v.get("remove") {
                live.remove(r["path"].as_str().unwrap());
            }
            if let Some(a) = v.get("add") {
                live.insert(a["path"].as_str().unwrap().to_owned());
            }
        }
    }
    live
}

#[test]
fn published_log_tracks_table_state() {
    let (db, _) = setup(|_| {});
    insert(&db, "T1", vec![row("a", 1), row("b", 2)]);
    delete(&db, "T1", 1);
    insert(&db, "T1", vec![row("c", 3)]);
    assert_eq!(publish(&db, "T1").unwrap().written.len(), 3);
    assert!(publish(&db, "T1").unwrap().written.is_empty());
    let live: BTreeSet<String> = db
        .committed_state(1)
        .unwrap()
        .live
        .keys()
        .map(|p| p.as_str().to_owned())
        .collect();
    assert_eq!(published(&db, 1), live);

    db.clone_table("T1", "C", None).unwrap();
    publish(&db, "C").unwrap();
    assert_eq!(published(&db, 2), live);
    assert!(published(&db, 2).iter().all(|p| p.starts_with("ws/1/data/")));
}

#[test]
fn scheduler_runs_due_maintenance() {
    let (db, _) = setup(|c| {
        c.min_rows_per_file = 10;
        c.small_file_trigger = 3;
        c.checkpoint_trigger = 4;
        c.publish = true;
    });
    let scheduler = Scheduler::start(db.clone());
    for i in 0..3 {
        insert(&db, "T1", vec![row("x", i)]);
    }
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    while health(&db, "T1").unwrap().live_files > 1 || db.checkpoints(1).is_empty() {
        assert!(std::time::Instant::now() < deadline, "scheduler did not catch up");
        std::thread::sleep(Duration::from_millis(5));
    }
    scheduler.stop();
    assert_eq!(scan(&db, "T1").len(), 3);
    assert!(!db.store().list_prefix(&paths::publish_log_dir("ws", 1)).unwrap().is_empty());
}
