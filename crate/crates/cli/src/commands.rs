use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use lakelog::clock::{Clock, SystemClock};
use lakelog::datafile::{ColumnType, Row, Schema, Value};
use lakelog::maintenance;
use lakelog::txn::{Assignments, TxnSession};
use lakelog::{AsOf, Database, EngineConfig, EngineError, EngineResult, Predicate, ScanOptions, TableSpec, Txn};
use serde::{Deserialize, Serialize};

use crate::output::Out;
use crate::session::Registry;
use crate::{replay, workload, Cli, Command};

/// Returned for invocations that are well-formed for clap but still misuse a verb.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<EngineError>() {
        Some(err) if err.is_conflict() => 3,
        _ => 1,
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// On-disk config: engine settings plus an optional default root.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    pub root: Option<PathBuf>,
    #[serde(flatten)]
    pub engine: EngineConfig,
}

struct Ctx {
    root: PathBuf,
    config: EngineConfig,
    session: Option<String>,
    out: Out,
}

fn load_config(cli: &Cli) -> Result<(PathBuf, EngineConfig)> {
    let default_root = || cli.root.clone().unwrap_or_else(|| PathBuf::from("lakelog-data"));
    let path = cli.config.clone().unwrap_or_else(|| default_root().join("config.toml"));
    let file: CliConfig = match fs::read_to_string(&path) {
        Ok(text) => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        Err(_) if cli.config.is_none() => CliConfig::default(),
        Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
    };
    let root = cli.root.clone().or(file.root).unwrap_or_else(default_root);
    let mut engine = file.engine;
    engine.seed = cli.seed.unwrap_or_else(rand::random);
    Ok((root, engine))
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let (root, config) = load_config(&cli)?;
    let ctx = Ctx {
        root,
        config,
        session: cli.session.clone(),
        out: Out {
            porcelain: cli.porcelain,
        },
    };
    match cli.command {
        Command::Init => init(&ctx),
        Command::Replay => {
            let ok = replay::run(ctx.out, ctx.config)?;
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::Workload { file } => {
            let seed = cli.seed.unwrap_or(0);
            let ok = workload::run_file(&file, seed, ctx.config, ctx.out)?;
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::CreateTable {
            name,
            schema,
            distributions,
            distribute_by,
            partition_by,
        } => {
            let db = ctx.open()?;
            let schema = parse_schema(&schema)?;
            let by: Vec<&str> = distribute_by.iter().map(String::as_str).collect();
            let part: Vec<&str> = partition_by.iter().map(String::as_str).collect();
            let spec = TableSpec::new(&name, schema)
                .distributions(distributions)
                .distribute_by(&by)
                .partition_by(&part);
            let def = db.create_table(spec)?;
            ctx.out.say("table_id", def.id, || format!("created table {} (id {})", def.name, def.id));
            Ok(())
        }
        Command::DropTable { name } => {
            ctx.open()?.drop_table(&name)?;
            ctx.out.say("dropped", &name, || format!("dropped table {name}"));
            Ok(())
        }
        Command::Insert { table, rows } => {
            let db = ctx.open()?;
            let schema = db.table(&table)?.schema;
            let rows = rows.iter().map(|r| parse_row(&schema, r)).collect::<Result<Vec<_>>>()?;
            let n = ctx.statement(&db, |t| t.insert(&table, rows))?;
            ctx.out.say("inserted", n, || format!("inserted {n} rows"));
            Ok(())
        }
        Command::Delete { table, filter } => {
            let db = ctx.open()?;
            let pred = Predicate::parse_all(&filter)?;
            let n = ctx.statement(&db, |t| t.delete(&table, &pred))?;
            ctx.out.say("deleted", n, || format!("deleted {n} rows"));
            Ok(())
        }
        Command::Update { table, set, filter } => {
            let db = ctx.open()?;
            let pred = Predicate::parse_all(&filter)?;
            let set = Assignments::parse_all(&set)?;
            let n = ctx.statement(&db, |t| t.update(&table, &set, &pred))?;
            ctx.out.say("updated", n, || format!("updated {n} rows"));
            Ok(())
        }
        Command::Scan {
            table,
            columns,
            filter,
            sum,
            count,
            as_of,
        } => {
            let db = ctx.open()?;
            let mut opts = match (&sum, count) {
                (Some(c), _) => ScanOptions::sum(c),
                (None, true) => ScanOptions::count(),
                (None, false) => ScanOptions::all(),
            };
            opts = opts.filter(Predicate::parse_all(&filter)?);
            if !columns.is_empty() {
                let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
                opts = opts.project(&cols);
            }
            if let Some(p) = &as_of {
                opts = opts.as_of(p.parse::<AsOf>()?);
            }
            let res = ctx.statement(&db, |t| t.scan(&table, &opts))?;
            match (&sum, res.aggregate) {
                (Some(c), Some(v)) => ctx.out.say("sum", &v, || format!("SUM({c}) = {v}")),
                (None, Some(v)) => ctx.out.say("count", &v, || format!("COUNT(*) = {v}")),
                _ => ctx.out.rows(&res.columns, &res.rows),
            }
            Ok(())
        }
        Command::Begin { isolation, granularity } => {
            let name = ctx.session_name("begin")?;
            let registry = Registry::new(&ctx.root);
            if registry.exists(name)? {
                bail!("session {name:?} is already open");
            }
            let db = ctx.open()?;
            let txn = db.begin_with(
                isolation.unwrap_or(ctx.config.isolation),
                granularity.unwrap_or(ctx.config.granularity),
            );
            let ts = txn.begin_ts();
            let iso = txn.isolation();
            registry.save(name, &txn.suspend())?;
            if ctx.out.porcelain {
                ctx.out.kv("session", name);
                ctx.out.kv("begin_ts", ts);
            } else {
                println!("session {name} begun (begin_ts {ts}, isolation {iso})");
            }
            Ok(())
        }
        Command::Commit => {
            let name = ctx.session_name("commit")?;
            let registry = Registry::new(&ctx.root);
            let db = ctx.open()?;
            let mut txn = db.resume(registry.load(name)?);
            let result = txn.commit();
            registry.remove(name)?;
            let outcome = result?;
            if ctx.out.porcelain {
                ctx.out.kv("version", outcome.version);
            } else {
                println!("committed session {name} at version {}", outcome.version);
            }
            for m in &outcome.manifests {
                println!(
                    "manifest table={} seq={} wallclock={} file={}",
                    m.table_id,
                    m.sequence_id,
                    m.commit_wallclock,
                    m.manifest_file.as_str()
                );
            }
            Ok(())
        }
        Command::Abort => {
            let name = ctx.session_name("abort")?;
            let registry = Registry::new(&ctx.root);
            let db = ctx.open()?;
            let mut txn = db.resume(registry.load(name)?);
            txn.abort();
            registry.remove(name)?;
            ctx.out.say("aborted", name, || format!("aborted session {name}"));
            Ok(())
        }
        Command::Clone { source, target, as_of } => {
            let db = ctx.open()?;
            let point = as_of.as_deref().map(str::parse::<AsOf>).transpose()?;
            let def = db.clone_table(&source, &target, point)?;
            ctx.out.say("table_id", def.id, || format!("cloned {source} into {target} (id {})", def.id));
            Ok(())
        }
        Command::Compact { table } => {
            let db = ctx.open()?;
            let report = maintenance::compact(&db, &table)?;
            if ctx.out.porcelain {
                ctx.out.kv("removed", report.removed.len());
                ctx.out.kv("written", report.written);
            } else {
                println!("compacted {} files into {}", report.removed.len(), report.written);
            }
            Ok(())
        }
        Command::Checkpoint { table } => {
            let db = ctx.open()?;
            let row = maintenance::checkpoint(&db, &table)?;
            if ctx.out.porcelain {
                ctx.out.kv("upto", row.upto_sequence);
                ctx.out.kv("path", row.path.as_str());
            } else {
                println!("checkpoint through seq {} at {}", row.upto_sequence, row.path.as_str());
            }
            Ok(())
        }
        Command::Gc => {
            let db = ctx.open()?;
            let r = maintenance::garbage_collect(&db)?;
            let groups = [
                ("deleted_inactive", &r.deleted_inactive),
                ("deleted_orphans", &r.deleted_orphans),
                ("retained_orphans", &r.retained_orphans),
                ("deleted_checkpoints", &r.deleted_checkpoints),
                ("discarded_staged", &r.discarded_staged),
            ];
            ctx.out.kv("threshold", r.threshold);
            ctx.out.kv("active", r.active);
            for (key, paths) in groups {
                ctx.out.kv(key, paths.len());
                if !ctx.out.porcelain {
                    for p in paths {
                        println!("  {}", p.as_str());
                    }
                }
            }
            Ok(())
        }
        Command::Publish { table } => {
            let db = ctx.open()?;
            let r = maintenance::publish(&db, &table)?;
            ctx.out.say("written", r.written.len(), || format!("published {} log entries", r.written.len()));
            Ok(())
        }
        Command::Health { table } => {
            let db = ctx.open()?;
            let h = maintenance::health(&db, &table)?;
            if ctx.out.porcelain {
                ctx.out.kv("live_files", h.live_files);
                ctx.out.kv("small_files", h.small_files);
                ctx.out.kv("manifests_since_checkpoint", h.manifests_since_checkpoint);
                ctx.out.kv("compaction_due", h.compaction_due);
                ctx.out.kv("checkpoint_due", h.checkpoint_due);
                for (mag, n) in &h.rows_per_file {
                    ctx.out.kv(&format!("files_rows_lt_1e{mag}"), n);
                }
            } else {
                println!("{}", serde_json::to_string_pretty(&h)?);
            }
            Ok(())
        }
        Command::ExportCatalog { file } => {
            let db = ctx.open()?;
            let bytes = db.catalog().export_snapshot();
            fs::write(&file, &bytes).with_context(|| format!("writing {}", file.display()))?;
            ctx.out.say("bytes", bytes.len(), || format!("exported catalog to {}", file.display()));
            Ok(())
        }
        Command::ImportCatalog { file, replace } => {
            let bytes = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            if replace {
                let current = ctx.root.join("catalog");
                let aside = ctx.root.join(format!("catalog.replaced-{}", SystemClock.now_ms()));
                fs::rename(&current, &aside).with_context(|| format!("moving {}", current.display()))?;
                ctx.out.note(format!("previous catalog kept at {}", aside.display()));
            }
            let db = ctx.open()?;
            db.catalog().import_snapshot(&bytes).map_err(EngineError::from)?;
            ctx.out.say("imported", file.display(), || format!("imported catalog from {}", file.display()));
            Ok(())
        }
    }?;
    Ok(ExitCode::SUCCESS)
}

fn init(ctx: &Ctx) -> Result<()> {
    fs::create_dir_all(ctx.root.join("objects"))?;
    fs::create_dir_all(ctx.root.join("catalog"))?;
    fs::create_dir_all(ctx.root.join("sessions"))?;
    let cfg = ctx.root.join("config.toml");
    if !cfg.exists() {
        let mut engine = ctx.config.clone();
        engine.seed = 0;
        let text = toml::to_string_pretty(&CliConfig { root: None, engine })?;
        fs::write(&cfg, text)?;
    }
    Database::open(&ctx.root, ctx.config.clone(), Arc::new(SystemClock))?;
    ctx.out.say("root", ctx.root.display(), || format!("initialized {}", ctx.root.display()));
    Ok(())
}

impl Ctx {
    fn open(&self) -> Result<Database> {
        if !self.root.join("objects").is_dir() {
            bail!("{} is not initialized; run `lakelog init` first", self.root.display());
        }
        let db = Database::open(&self.root, self.config.clone(), Arc::new(SystemClock))?;
        for s in Registry::new(&self.root).others(self.session.as_deref())? {
            db.catalog().pin(s.begin_ts());
        }
        Ok(db)
    }

    fn session_name(&self, verb: &str) -> Result<&str> {
        self.session
            .as_deref()
            .ok_or_else(|| usage(format!("`{verb}` needs --session NAME")))
    }

    /// Runs one statement in the named session, or in its own transaction.
    fn statement<T>(&self, db: &Database, body: impl FnOnce(&mut Txn) -> EngineResult<T>) -> Result<T> {
        match &self.session {
            Some(name) => {
                let registry = Registry::new(&self.root);
                let session: TxnSession = registry.load(name)?;
                let mut txn = db.resume(session);
                let result = body(&mut txn);
                if txn.status() == lakelog::catalog::TxnStatus::Active {
                    registry.save(name, &txn.suspend())?;
                } else {
                    registry.remove(name)?;
                }
                Ok(result?)
            }
            None => {
                let mut txn = db.begin();
                let value = body(&mut txn)?;
                txn.commit()?;
                Ok(value)
            }
        }
    }
}

pub fn parse_schema(text: &str) -> Result<Schema> {
    let mut cols = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, ty) = part
            .split_once(':')
            .ok_or_else(|| anyhow!("column {part:?} must look like NAME:TYPE"))?;
        let ty = ColumnType::parse(ty.trim()).ok_or_else(|| anyhow!("unknown column type {ty:?}"))?;
        cols.push((name.trim(), ty));
    }
    Ok(Schema::of(&cols)?)
}

pub fn parse_row(schema: &Schema, text: &str) -> Result<Row> {
    let fields: Vec<&str> = text.split(',').map(str::trim).collect();
    parse_fields(schema, &fields)
}

pub fn parse_fields<S: AsRef<str>>(schema: &Schema, fields: &[S]) -> Result<Row> {
    if fields.len() != schema.len() {
        bail!("expected {} values, got {}", schema.len(), fields.len());
    }
    schema
        .columns()
        .iter()
        .zip(fields)
        .map(|(c, f)| {
            Value::parse_as(c.ty, f.as_ref()).ok_or_else(|| anyhow!("{:?} is not a valid {} for {}", f.as_ref(), c.ty, c.name))
        })
        .collect()
}
