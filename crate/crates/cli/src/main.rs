//! `humantool`: operator entry points for the orchestration engine.
//!
//! Exit codes: 0 success, 1 domain failure (the session ended badly),
//! 2 usage or data error.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod profile;
mod report;
mod run;
mod serve;

#[derive(Debug, Parser)]
#[command(name = "humantool", version, about = "Run, serve and audit human-as-a-tool sessions")]
struct Cli {
    /// Base directory for relative paths and session logs.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create or check human profiles.
    #[command(subcommand)]
    Profile(ProfileCommand),
    /// Run one session to its end with scripted responses.
    Run(run::RunArgs),
    /// Serve sessions over a socket (or stdio) to a live console.
    Serve(serve::ServeArgs),
    /// Rebuild a session's state from its event log.
    Replay(ReplayArgs),
    /// Activation report over one or more event logs.
    Report(report::ReportArgs),
    /// Export the behavior and transition tables.
    #[command(subcommand)]
    Tables(TablesCommand),
}

#[derive(Debug, Subcommand)]
enum ProfileCommand {
    /// Build a profile from the eight questionnaire answers.
    Init(profile::InitArgs),
    /// Check a profile file.
    Validate {
        path: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum TablesCommand {
    /// Write behaviors.json and transitions.json.
    Export {
        /// Directory to write into; stdout when absent.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// An events.ndjson file.
    log: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlannerKind {
    Scripted,
    Llm,
}

/// Common context for subcommands.
pub struct Ctx {
    pub workdir: PathBuf,
    pub json: bool,
}

impl Ctx {
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }
}

#[derive(Debug)]
pub enum Failure {
    /// Bad input or environment: exit 2.
    Usage(String),
    /// The work ran but the outcome is a failure: exit 1.
    Domain(String),
}

impl Failure {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Failure::Usage(msg.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Domain(m) => f.write_str(m),
        }
    }
}

pub type CliResult = Result<(), Failure>;

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

pub fn pretty<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn replay(ctx: &Ctx, args: &ReplayArgs) -> CliResult {
    use humantool_core::store::{read_log_file, replay};
    let path = ctx.path(&args.log);
    let entries = read_log_file(&path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let state = replay(&entries)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        .ok_or_else(|| Failure::usage(format!("{}: log is empty", path.display())))?;
    let hash = state.state_hash();
    let snapshot = path.with_file_name("snapshot.json");
    let snapshot_hash = if snapshot.exists() {
        let snap: humantool_core::orchestrator::SessionState = read_json(&snapshot)?;
        Some(snap.state_hash())
    } else {
        None
    };
    let matches = snapshot_hash.as_ref().map(|h| *h == hash);
    if ctx.json {
        let out = serde_json::json!({
            "session_id": state.header.session_id,
            "entries": entries.len(),
            "stage": state.stage,
            "census": state.tree.census(),
            "state_hash": hash,
            "snapshot_matches": matches,
        });
        print!("{}", pretty(&out));
    } else {
        println!("session {}: {} entries, stage {}", state.header.session_id, entries.len(), state.stage.as_str());
        println!("census: {}", run::census_line(&state.tree.census()));
        println!("state hash {hash}");
        match matches {
            Some(true) => println!("snapshot: matches"),
            Some(false) => println!("snapshot: DIFFERS"),
            None => println!("snapshot: none"),
        }
    }
    match matches {
        Some(false) => Err(Failure::Domain(format!("{}: replayed state differs from the snapshot", path.display()))),
        _ => Ok(()),
    }
}

fn tables(ctx: &Ctx, out_dir: Option<&Path>) -> CliResult {
    use humantool_core::interaction::{behavior_table_json, transition_table_json};
    let behaviors = pretty(&behavior_table_json());
    let transitions = pretty(&transition_table_json());
    match out_dir {
        Some(dir) => {
            let dir = ctx.path(dir);
            write_file(&dir.join("behaviors.json"), &behaviors)?;
            write_file(&dir.join("transitions.json"), &transitions)?;
            if !ctx.json {
                println!("wrote {} and {}", dir.join("behaviors.json").display(), dir.join("transitions.json").display());
            }
        }
        None => {
            let both = serde_json::json!({ "behaviors": behavior_table_json(), "transitions": transition_table_json() });
            print!("{}", pretty(&both));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx { workdir: cli.workdir, json: cli.json };
    let result = match &cli.command {
        Command::Profile(ProfileCommand::Init(args)) => profile::init(&ctx, args),
        Command::Profile(ProfileCommand::Validate { path }) => profile::validate(&ctx, path),
        Command::Run(args) => run::run(&ctx, args),
        Command::Serve(args) => serve::serve(&ctx, args),
        Command::Replay(args) => replay(&ctx, args),
        Command::Report(args) => report::report(&ctx, args),
        Command::Tables(TablesCommand::Export { out_dir }) => tables(&ctx, out_dir.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain(m)) => {
            eprintln!("humantool: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("humantool: {m}");
            ExitCode::from(2)
        }
    }
}
