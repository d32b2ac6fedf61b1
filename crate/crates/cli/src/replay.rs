//! The four-transaction concurrent update scenario, replayed against an
//! in-memory engine with a manual clock.

use std::sync::Arc;

use anyhow::Result;
use lakelog::clock::ManualClock;
use lakelog::datafile::{ColumnType, Schema, Value};
use lakelog::txn::CmpOp;
use lakelog::{AsOf, Database, EngineConfig, Predicate, ScanOptions, TableSpec};

use crate::output::Out;

struct Checker {
    out: Out,
    ok: bool,
}

impl Checker {
    fn expect(&mut self, step: &str, got: String, want: &str) {
        let pass = got == want;
        self.ok &= pass;
        let mark = if pass { "ok" } else { "MISMATCH" };
        if self.out.porcelain {
            println!("{step} got={got} want={want} {mark}");
        } else {
            println!("{step:<44} {got:<12} (expected {want}) {mark}");
        }
    }
}

fn row(c1: &str, c2: i64) -> Vec<Value> {
    vec![Value::from(c1), Value::Int(c2)]
}

fn sum(v: lakelog::EngineResult<Value>) -> String {
    match v {
        Ok(v) => v.to_string(),
        Err(e) => format!("error: {e}"),
    }
}

pub fn run(out: Out, mut config: EngineConfig) -> Result<bool> {
    config.seed = 0;
    let clock = Arc::new(ManualClock::new(1_000));
    let db = Database::in_memory_with_clock(config, clock.clone());
    let schema = Schema::of(&[("C1", ColumnType::Utf8), ("C2", ColumnType::Int64)])?;
    let table = db.create_table(TableSpec::new("T1", schema))?.id;
    let mut check = Checker { out, ok: true };

    out.note("t1: X1 inserts (A,1) (B,2) (C,3) and commits");
    let mut x1 = db.begin();
    x1.insert("T1", vec![row("A", 1), row("B", 2), row("C", 3)])?;
    let seq = x1.commit()?.manifests.first().map_or(0, |m| m.sequence_id);
    check.expect("t1 X1 commit sequence", seq.to_string(), "1");

    clock.set(2_000);
    out.note("t2: X2 and X3 begin; X2 inserts (D,4) (E,5) and deletes C1=A");
    let mut x2 = db.begin();
    let mut x3 = db.begin();
    x2.insert("T1", vec![row("D", 4), row("E", 5)])?;
    let deleted = x2.delete("T1", &Predicate::term("C1", CmpOp::Eq, "A"))?;
    check.expect("t2 X2 rows deleted", deleted.to_string(), "1");
    check.expect("t2 X3 SUM(C2)", sum(x3.sum("T1", "C2")), "6");

    clock.set(3_000);
    out.note("t3: X2 commits; X3 deletes C1=B");
    let seq = x2.commit()?.manifests.first().map_or(0, |m| m.sequence_id);
    check.expect("t3 X2 commit sequence", seq.to_string(), "2");
    let deleted = x3.delete("T1", &Predicate::term("C1", CmpOp::Eq, "B"))?;
    check.expect("t3 X3 rows deleted", deleted.to_string(), "1");

    clock.set(4_000);
    out.note("t4: X3 commits; X4 reads");
    let before = db.catalog().export_snapshot();
    let verdict = match x3.commit() {
        Ok(_) => "committed".to_string(),
        Err(e) if e.is_conflict() => "conflict".to_string(),
        Err(e) => format!("error: {e}"),
    };
    check.expect("t4 X3 commit", verdict, "conflict");
    let unchanged = db.catalog().export_snapshot() == before;
    check.expect("t4 catalog unchanged by X3", unchanged.to_string(), "true");
    let mut x4 = db.begin();
    check.expect("t4 X4 SUM(C2)", sum(x4.sum("T1", "C2")), "14");
    let seqs: Vec<String> = db.manifests(table).iter().map(|m| m.sequence_id.to_string()).collect();
    check.expect("t4 committed manifest sequences", seqs.join(","), "1,2");

    let mut reader = db.begin();
    let at = |t| ScanOptions::sum("C2").as_of(AsOf::Time(t));
    let agg = |r: lakelog::EngineResult<lakelog::txn::ScanResult>| match r {
        Ok(r) => r.aggregate.map_or("none".into(), |v| v.to_string()),
        Err(e) => format!("error: {e}"),
    };
    check.expect("as of t2 SUM(C2)", agg(reader.scan("T1", &at(2_000))), "6");
    check.expect("as of t3 SUM(C2)", agg(reader.scan("T1", &at(3_000))), "14");

    if out.porcelain {
        println!("result={}", if check.ok { "pass" } else { "fail" });
    } else {
        println!("{}", if check.ok { "scenario reproduced" } else { "scenario DIVERGED" });
    }
    Ok(check.ok)
}
