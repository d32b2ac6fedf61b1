use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lakelog::catalog::Isolation;
use lakelog::txn::Granularity;

mod commands;
mod output;
mod replay;
mod session;
mod workload;

#[derive(Debug, Parser)]
#[command(name = "lakelog", version, about = "Transactional log-structured tables over an object store")]
pub struct Cli {
    /// Storage root holding objects, the catalog journal and sessions.
    #[arg(long, global = true, env = "LAKELOG_ROOT")]
    pub root: Option<PathBuf>,
    /// Engine config file (TOML). Defaults to `<root>/config.toml`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run the statement inside this named session.
    #[arg(long, global = true)]
    pub session: Option<String>,
    /// Stable key=value output.
    #[arg(long, global = true)]
    pub porcelain: bool,
    /// Seed for transaction ids and generated data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create the storage root and a default config.
    Init,
    /// Create a table, e.g. `--schema C1:utf8,C2:int64`.
    CreateTable {
        name: String,
        #[arg(long)]
        schema: String,
        #[arg(long, default_value_t = 1)]
        distributions: u32,
        #[arg(long, value_delimiter = ',')]
        distribute_by: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        partition_by: Vec<String>,
    },
    /// Drop a table. Its files go at the next gc.
    DropTable {
        name: String,
    },
    /// Insert rows given as comma separated values, one `--row` each.
    Insert {
        table: String,
        #[arg(long = "row", required = true)]
        rows: Vec<String>,
    },
    /// Delete rows matching every `--where` term.
    Delete {
        table: String,
        /// Conjunct such as `C2>=3`; repeat for AND.
        #[arg(long = "where")]
        filter: Vec<String>,
    },
    /// Rewrite matching rows with the `--set` values.
    Update {
        table: String,
        /// Assignment such as `C2=7`.
        #[arg(long, required = true)]
        set: Vec<String>,
        #[arg(long = "where")]
        filter: Vec<String>,
    },
    /// Print matching rows, or a sum or count.
    Scan {
        table: String,
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
        #[arg(long = "where")]
        filter: Vec<String>,
        #[arg(long)]
        sum: Option<String>,
        #[arg(long, conflicts_with = "sum")]
        count: bool,
        /// `seq:N` for a sequence id, otherwise a commit time in ms.
        #[arg(long)]
        as_of: Option<String>,
    },
    /// Open the session named by `--session`.
    Begin {
        #[arg(long)]
        isolation: Option<Isolation>,
        #[arg(long)]
        granularity: Option<Granularity>,
    },
    /// Commit the session. A write-write conflict exits with code 3.
    Commit,
    /// Discard the session and its writes.
    Abort,
    /// Zero-copy clone of a table, optionally as of an earlier point.
    Clone {
        source: String,
        target: String,
        #[arg(long)]
        as_of: Option<String>,
    },
    /// Rewrite small or heavily deleted files.
    Compact {
        table: String,
    },
    /// Write a checkpoint of the latest table state.
    Checkpoint {
        table: String,
    },
    /// Delete expired and orphaned objects.
    Gc,
    /// Append commit-log entries for unpublished commits.
    Publish {
        table: String,
    },
    /// Show file counts, deleted fractions and due maintenance.
    Health {
        table: String,
    },
    /// Replay the four-transaction concurrent update scenario in memory.
    Replay,
    /// Run a multi-client scenario file in memory.
    Workload {
        file: PathBuf,
    },
    /// Write a snapshot of the catalog to a file.
    ExportCatalog {
        file: PathBuf,
    },
    /// Load an exported catalog. The target catalog must be empty unless
    /// `--replace` moves the current one aside first.
    ImportCatalog {
        file: PathBuf,
        #[arg(long)]
        replace: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
