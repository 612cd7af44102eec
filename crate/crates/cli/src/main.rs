use std::io::{self, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pmcdb::error::{Error, Result};
use pmcdb::model::UserId;
use pmcdb_cli::{self as cli, exit, AuditKind, InitOptions, Role, Transport, Workspace};

#[derive(Parser)]
#[command(name = "pmcdb", version, about = "Encrypted multi-server database with hidden search, access and size patterns")]
struct Cli {
    /// Deployment directory.
    #[arg(long, global = true, default_value = ".")]
    dir: PathBuf,
    /// Key file (defaults to <dir>/keys.toml). PMCDB_S1/PMCDB_S2 take precedence.
    #[arg(long, global = true)]
    key_file: Option<PathBuf>,
    /// Seed for every random choice, for reproducible runs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = TransportKind::Inproc)]
    transport: TransportKind,
    #[arg(long, global = true)]
    sss: Option<SocketAddr>,
    #[arg(long, global = true)]
    iws: Option<SocketAddr>,
    #[arg(long, global = true)]
    rss: Option<SocketAddr>,
    /// User id presented to the servers.
    #[arg(long, global = true, default_value_t = 1)]
    user: u32,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportKind {
    Inproc,
    Tcp,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encrypt a CSV table into a new deployment directory.
    Init {
        csv: PathBuf,
        #[arg(long, default_value_t = 0)]
        group_bits: u32,
        #[arg(long, default_value_t = 1)]
        lambda: usize,
        #[arg(long, default_value_t = 16)]
        elem_len: usize,
        /// keyed, mod:<n> or table:<file of element,group lines>.
        #[arg(long, default_value = "keyed")]
        grouping: String,
    },
    /// Host one server role over TCP.
    Serve {
        #[arg(long)]
        role: String,
        #[arg(long)]
        addr: SocketAddr,
        /// Exit after this many client connections.
        #[arg(long)]
        max_connections: Option<usize>,
    },
    /// Print the rows whose FIELD equals VALUE.
    Select { field: String, value: String },
    /// Insert one row, one value per field.
    Insert {
        #[arg(required = true)]
        values: Vec<String>,
    },
    /// Delete the rows whose FIELD equals VALUE.
    Delete { field: String, value: String },
    /// Run pattern audits on an in-memory copy of the deployment.
    Audit {
        #[arg(long, default_value = "all")]
        kind: String,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Write the report as JSON lines.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Drop dummy records that no longer pad anything.
    Compact,
    /// Record counts and per-group thresholds.
    Stats,
    /// Block a user at the storage and index services.
    Revoke { user: u32 },
    /// Generate a single-column table of zero-padded integer keys.
    Gen {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        distinct: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn transport(cli: &Cli) -> Result<Transport> {
    match cli.transport {
        TransportKind::Inproc => Ok(Transport::InProc),
        TransportKind::Tcp => match (cli.sss, cli.iws, cli.rss) {
            (Some(sss), Some(iws), Some(rss)) => Ok(Transport::Tcp { sss, iws, rss }),
            _ => Err(Error::param("--transport tcp needs --sss, --iws and --rss")),
        },
    }
}

fn workspace(cli: &Cli) -> Result<Workspace> {
    Workspace::open(&cli.dir, cli.key_file.as_deref())
}

fn run(cli: &Cli) -> Result<i32> {
    let user = UserId(cli.user);
    let mut out = io::stdout().lock();
    match &cli.cmd {
        Cmd::Init {
            csv,
            group_bits,
            lambda,
            elem_len,
            grouping,
        } => {
            let opts = InitOptions {
                group_bits: *group_bits,
                lambda: *lambda,
                elem_len: *elem_len,
                grouping: cli::parse_grouping(grouping)?,
            };
            let key_file = cli.key_file.clone().unwrap_or_else(|| cli::default_key_file(&cli.dir));
            let s = cli::init(csv, &cli.dir, &key_file, &opts, cli.seed)?;
            writeln!(
                out,
                "{} rows, {} records ({} dummy), {} groups",
                s.rows, s.records, s.dummies, s.groups
            )?;
            if s.undersized > 0 {
                eprintln!("warning: {} groups hold fewer than lambda elements", s.undersized);
            }
            if let Some(p) = s.key_file {
                eprintln!("keys written to {}; keep this file away from the servers", p.display());
            }
        }
        Cmd::Serve {
            role,
            addr,
            max_connections,
        } => {
            let role: Role = role.parse()?;
            let listener = TcpListener::bind(addr)?;
            eprintln!("serving {role:?} on {}", listener.local_addr()?);
            cli::serve_role(&cli.dir, cli.key_file.as_deref(), role, &listener, *max_connections, cli.seed)?;
        }
        Cmd::Select { field, value } => {
            let ws = workspace(cli)?;
            let t = cli::select(&ws, &transport(cli)?, user, field, value, cli.seed)?;
            cli::write_rows(&mut out, &ws.manifest.field_names, &t.rows)?;
        }
        Cmd::Insert { values } => {
            let ws = workspace(cli)?;
            let t = cli::insert(&ws, &transport(cli)?, user, values, cli.seed)?;
            writeln!(
                out,
                "inserted 1 row plus {} dummy rows; {} groups reshuffled",
                t.w,
                t.touched.len()
            )?;
        }
        Cmd::Delete { field, value } => {
            let ws = workspace(cli)?;
            let t = cli::delete(&ws, &transport(cli)?, user, field, value, cli.seed)?;
            writeln!(out, "deleted {} rows", t.deleted)?;
        }
        Cmd::Audit { kind, trials, report } => {
            let ws = workspace(cli)?;
            let kind: AuditKind = kind.parse()?;
            let r = cli::audit(&ws, kind, *trials, cli.seed)?;
            write!(out, "{}", r.to_text())?;
            if let Some(p) = report {
                std::fs::write(p, r.to_json_lines())?;
            }
            if !r.ok() {
                return Ok(exit::PROTOCOL);
            }
        }
        Cmd::Compact => {
            let r = cli::compact(&workspace(cli)?, cli.seed)?;
            writeln!(out, "{} slots nulled, {} dummy records removed", r.nulled, r.removed)?;
        }
        Cmd::Stats => write!(out, "{}", cli::stats(&workspace(cli)?)?)?,
        Cmd::Revoke { user } => {
            cli::revoke(&workspace(cli)?, &transport(cli)?, UserId(*user))?;
            writeln!(out, "user {user} revoked")?;
        }
        Cmd::Gen { rows, distinct, out: path } => match path {
            Some(p) => cli::gen(std::fs::File::create(p)?, *rows, *distinct, cli.seed)?,
            None => cli::gen(&mut out, *rows, *distinct, cli.seed)?,
        },
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
