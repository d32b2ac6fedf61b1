//! Scripted multi-client scenarios.
//!
//! A scenario names tables to create and load, then lists clients whose
//! steps carry a logical time `at`. Steps run one at a time in `at` order;
//! clients that share an `at` are ordered by a permutation drawn from the
//! seed, so one seed always yields the same interleaving and transcript.
//! The engine clock reads `at` while a step runs.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use lakelog::catalog::Isolation;
use lakelog::clock::ManualClock;
use lakelog::datafile::{ColumnType, Row, Schema, Value};
use lakelog::txn::{Assignments, Granularity};
use lakelog::{AsOf, Database, EngineConfig, EngineResult, Predicate, ScanOptions, TableSpec, Txn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer};
use serde_yaml::Value as Yaml;

use crate::commands::{parse_fields, parse_schema};
use crate::output::Out;

#[derive(Debug, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default, deserialize_with = "by_name")]
    pub isolation: Option<Isolation>,
    #[serde(default, deserialize_with = "by_name")]
    pub granularity: Option<Granularity>,
    #[serde(default)]
    pub tables: Vec<TableSetup>,
    pub clients: Vec<Client>,
    #[serde(default)]
    pub checks: Vec<Check>,
}

#[derive(Debug, Deserialize)]
pub struct TableSetup {
    pub name: String,
    /// `C1:utf8,C2:int64`
    pub schema: String,
    #[serde(default = "one")]
    pub distributions: u32,
    #[serde(default)]
    pub distribute_by: Vec<String>,
    #[serde(default)]
    pub load: Vec<Vec<Yaml>>,
}

fn by_name<'de, D, T>(d: D) -> Result<Option<T>, D::Error>
where
    D: Deserializer<'de>,
    T: FromStr,
    T::Err: Display,
{
    Option::<String>::deserialize(d)?
        .map(|s| s.parse().map_err(D::Error::custom))
        .transpose()
}

fn one() -> u32 {
    1
}

#[derive(Debug, Deserialize)]
pub struct Client {
    pub name: String,
    pub steps: Vec<Step>,
}

#[derive(Debug, Deserialize)]
pub struct Step {
    pub at: u64,
    #[serde(flatten)]
    pub op: Op,
    pub expect: Option<Yaml>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Begin {
        #[serde(default, deserialize_with = "by_name")]
        isolation: Option<Isolation>,
        #[serde(default, deserialize_with = "by_name")]
        granularity: Option<Granularity>,
    },
    Insert {
        table: String,
        #[serde(default)]
        rows: Vec<Vec<Yaml>>,
        /// Number of generated rows, in addition to `rows`.
        #[serde(default)]
        random: usize,
    },
    Delete {
        table: String,
        #[serde(default, rename = "where")]
        filter: Vec<String>,
    },
    Update {
        table: String,
        set: Vec<String>,
        #[serde(default, rename = "where")]
        filter: Vec<String>,
    },
    Scan(Query),
    Commit,
    Abort,
}

#[derive(Clone, Debug, Deserialize)]
pub struct Query {
    pub table: String,
    pub sum: Option<String>,
    #[serde(default)]
    pub count: bool,
    #[serde(default, rename = "where")]
    pub filter: Vec<String>,
    pub as_of: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct Check {
    #[serde(flatten)]
    pub query: Query,
    pub expect: Yaml,
}

#[derive(Debug, Default)]
pub struct Summary {
    pub steps: usize,
    pub commits: usize,
    pub conflicts: usize,
    pub mismatches: usize,
}

pub fn run_file(path: &Path, seed: u64, config: EngineConfig, out: Out) -> Result<bool> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let scenario: Scenario = serde_yaml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    reject_empty(&scenario)?;
    let summary = run(&scenario, seed, config, out)?;
    Ok(summary.mismatches == 0)
}

fn scalar(v: &Yaml) -> String {
    match v {
        Yaml::String(s) => s.clone(),
        Yaml::Number(n) => n.to_string(),
        Yaml::Bool(b) => b.to_string(),
        Yaml::Null => String::new(),
        other => serde_yaml::to_string(other).unwrap_or_default().trim().to_owned(),
    }
}

fn yaml_row(schema: &Schema, row: &[Yaml]) -> Result<Row> {
    let fields: Vec<String> = row.iter().map(scalar).collect();
    parse_fields(schema, &fields)
}

fn random_row(schema: &Schema, rng: &mut ChaCha8Rng) -> Row {
    schema
        .columns()
        .iter()
        .map(|c| match c.ty {
            ColumnType::Int64 => Value::Int(rng.gen_range(0..100)),
            ColumnType::Float64 => Value::Float(f64::from(rng.gen_range(0..10_000)) / 100.0),
            ColumnType::Utf8 => Value::Str(format!("k{}", rng.gen_range(0..1000))),
            ColumnType::Bool => Value::Bool(rng.gen()),
        })
        .collect()
}

/// Global step order: `(at, client rank at that time, step index)`.
fn schedule(scenario: &Scenario, seed: u64) -> Vec<(usize, usize)> {
    let times: BTreeSet<u64> = scenario.clients.iter().flat_map(|c| c.steps.iter().map(|s| s.at)).collect();
    let mut turns = Vec::new();
    for at in times {
        let mut clients: Vec<usize> = (0..scenario.clients.len()).collect();
        clients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ at.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        for c in clients {
            for (i, s) in scenario.clients[c].steps.iter().enumerate() {
                if s.at == at {
                    turns.push((c, i));
                }
            }
        }
    }
    turns
}

fn query(txn: &mut Txn, q: &Query) -> EngineResult<String> {
    let mut opts = match (&q.sum, q.count) {
        (Some(c), _) => ScanOptions::sum(c),
        (None, true) => ScanOptions::count(),
        (None, false) => ScanOptions::all(),
    };
    opts = opts.filter(Predicate::parse_all(&q.filter)?);
    if let Some(p) = &q.as_of {
        opts = opts.as_of(p.parse::<AsOf>()?);
    }
    let res = txn.scan(&q.table, &opts)?;
    Ok(match res.aggregate {
        Some(v) => v.to_string(),
        None => res.rows.len().to_string(),
    })
}

fn describe(op: &Op) -> String {
    match op {
        Op::Begin { isolation, .. } => match isolation {
            Some(i) => format!("begin {i}"),
            None => "begin".into(),
        },
        Op::Insert { table, rows, random } => format!("insert {table} rows={}", rows.len() + random),
        Op::Delete { table, filter } => format!("delete {table} where [{}]", filter.join(" and ")),
        Op::Update { table, set, filter } => {
            format!("update {table} set [{}] where [{}]", set.join(", "), filter.join(" and "))
        }
        Op::Scan(q) => match (&q.sum, q.count) {
            (Some(c), _) => format!("scan {} sum({c})", q.table),
            (None, true) => format!("scan {} count", q.table),
            (None, false) => format!("scan {}", q.table),
        },
        Op::Commit => "commit".into(),
        Op::Abort => "abort".into(),
    }
}

fn verdict<T: ToString>(r: EngineResult<T>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) if e.is_conflict() => "conflict".into(),
        Err(e) => format!("error: {e}"),
    }
}

pub fn run(scenario: &Scenario, seed: u64, mut config: EngineConfig, out: Out) -> Result<Summary> {
    config.seed = seed;
    if let Some(i) = scenario.isolation {
        config.isolation = i;
    }
    if let Some(g) = scenario.granularity {
        config.granularity = g;
    }
    let clock = Arc::new(ManualClock::new(0));
    let db = Database::in_memory_with_clock(config, clock.clone());
    if !scenario.name.is_empty() {
        out.note(format!("scenario {}", scenario.name));
    }
    for t in &scenario.tables {
        let schema = parse_schema(&t.schema)?;
        let by: Vec<&str> = t.distribute_by.iter().map(String::as_str).collect();
        db.create_table(TableSpec::new(&t.name, schema.clone()).distributions(t.distributions).distribute_by(&by))?;
        if !t.load.is_empty() {
            let rows = t.load.iter().map(|r| yaml_row(&schema, r)).collect::<Result<Vec<_>>>()?;
            let mut txn = db.begin();
            txn.insert(&t.name, rows)?;
            txn.commit()?;
        }
    }

    let mut txns: Vec<Option<Txn>> = scenario.clients.iter().map(|_| None).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..scenario.clients.len())
        .map(|i| ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 + 1)))
        .collect();
    let mut summary = Summary::default();

    for (c, i) in schedule(scenario, seed) {
        let client = &scenario.clients[c];
        let step = &client.steps[i];
        clock.set(step.at);
        let outcome = match &step.op {
            Op::Begin { isolation, granularity } => {
                if let Some(mut old) = txns[c].take() {
                    old.abort();
                }
                let txn = db.begin_with(
                    isolation.unwrap_or(db.config().isolation),
                    granularity.unwrap_or(db.config().granularity),
                );
                txns[c] = Some(txn);
                "ok".to_string()
            }
            Op::Commit => match txns[c].take() {
                Some(mut t) => {
                    let r = t.commit();
                    match &r {
                        Ok(_) => summary.commits += 1,
                        Err(e) if e.is_conflict() => summary.conflicts += 1,
                        Err(_) => {}
                    }
                    verdict(r.map(|_| "ok"))
                }
                None => "error: no open transaction".into(),
            },
            Op::Abort => match txns[c].take() {
                Some(mut t) => {
                    t.abort();
                    "ok".into()
                }
                None => "error: no open transaction".into(),
            },
            op => {
                let autocommit = txns[c].is_none();
                let mut txn = txns[c].take().unwrap_or_else(|| db.begin());
                let result = statement(&db, &mut txn, op, &mut rngs[c]);
                let result = match result {
                    Ok(v) if autocommit => txn.commit().map(|_| {
                        summary.commits += 1;
                        v
                    }),
                    other => other,
                };
                if !autocommit && txn.status() == lakelog::catalog::TxnStatus::Active {
                    txns[c] = Some(txn);
                }
                if matches!(&result, Err(e) if e.is_conflict()) {
                    summary.conflicts += 1;
                }
                verdict(result)
            }
        };
        summary.steps += 1;
        let mut line = format!("[{:>6}] {:<10} {} -> {}", step.at, client.name, describe(&step.op), outcome);
        if let Some(want) = &step.expect {
            let want = scalar(want);
            if want != outcome {
                summary.mismatches += 1;
                line.push_str(&format!("  MISMATCH expected {want}"));
            }
        }
        println!("{line}");
    }
    for t in txns.iter_mut().flatten() {
        t.abort();
    }

    for check in &scenario.checks {
        let mut txn = db.begin();
        let got = verdict(query(&mut txn, &check.query));
        txn.abort();
        let want = scalar(&check.expect);
        let mark = if got == want {
            "ok"
        } else {
            summary.mismatches += 1;
            "MISMATCH"
        };
        println!("check {} -> {got} (expected {want}) {mark}", describe(&Op::Scan(check.query.clone())));
    }
    println!(
        "summary steps={} commits={} conflicts={} mismatches={}",
        summary.steps, summary.commits, summary.conflicts, summary.mismatches
    );
    Ok(summary)
}

fn statement(db: &Database, txn: &mut Txn, op: &Op, rng: &mut ChaCha8Rng) -> EngineResult<String> {
    let invalid = |e: anyhow::Error| lakelog::EngineError::Invalid(format!("{e:#}"));
    match op {
        Op::Insert { table, rows, random } => {
            let schema = db.table(table)?.schema;
            let mut all = rows.iter().map(|r| yaml_row(&schema, r)).collect::<Result<Vec<_>>>().map_err(invalid)?;
            all.extend((0..*random).map(|_| random_row(&schema, rng)));
            txn.insert(table, all).map(|n| n.to_string())
        }
        Op::Delete { table, filter } => txn.delete(table, &Predicate::parse_all(filter)?).map(|n| n.to_string()),
        Op::Update { table, set, filter } => txn
            .update(table, &Assignments::parse_all(set)?, &Predicate::parse_all(filter)?)
            .map(|n| n.to_string()),
        Op::Scan(q) => query(txn, q),
        Op::Begin { .. } | Op::Commit | Op::Abort => unreachable!("handled by the scheduler"),
    }
}

fn reject_empty(s: &Scenario) -> Result<()> {
    if s.clients.is_empty() {
        bail!("scenario has no clients");
    }
    Ok(())
}
