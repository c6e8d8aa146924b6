//! Benchmark front end for the cascaded pruning pipeline.
//!
//! Subcommands: `build` (models + dataset), `run` (sweeps to CSV/JSONL),
//! `ablate` (layer/token/criterion grids), `plot` (SVG curves and heatmaps).
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
//! With `--json`, errors are emitted machine-readable on stderr.

mod commands;
mod config;
mod lock;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::ablate::AblateKind;
use commands::Ctx;
use config::RunConfig;
use lock::DirLock;

/// Seed override honored between the config file and the --seed flag.
const SEED_ENV: &str = "CASCADE_PRUNE_SEED";

#[derive(Parser)]
#[command(name = "cascade-bench", version, about = "Cascaded pruning benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file (JSON); defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the config's global seed (also honors CASCADE_PRUNE_SEED).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory for artifacts and results.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Worker threads for instance-level parallelism (0 = all cores).
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    parallel: usize,

    /// Emit errors as JSON on stderr.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Construct the model pair and dataset, with a content-hash manifest.
    Build,
    /// Run the configured sweep, writing results.csv / results.jsonl.
    Run,
    /// Reproduce an ablation grid.
    Ablate {
        #[arg(value_enum)]
        which: AblateKind,
    },
    /// Render SVG curves and heatmaps from results files.
    Plot,
}

enum CmdError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let json = cli.json;
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Config(e)) => {
            report(json, "config", &e);
            ExitCode::from(1)
        }
        Err(CmdError::Runtime(e)) => {
            report(json, "runtime", &e);
            ExitCode::from(2)
        }
    }
}

fn report(json: bool, kind: &str, e: &anyhow::Error) {
    if json {
        let payload = serde_json::json!({
            "error": { "kind": kind, "message": format!("{e:#}") }
        });
        eprintln!("{payload}");
    } else {
        eprintln!("error ({kind}): {e:#}");
    }
}

fn dispatch(cli: Cli) -> Result<(), CmdError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(CmdError::Config)?,
        None => RunConfig::default(),
    };
    if let Ok(env_seed) = std::env::var(SEED_ENV) {
        config.seed = env_seed
            .parse()
            .map_err(|_| CmdError::Config(anyhow::anyhow!("{SEED_ENV} must be an integer")))?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate().map_err(CmdError::Config)?;

    if cli.parallel > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.parallel)
            .build_global()
            .map_err(|e| CmdError::Runtime(e.into()))?;
    }

    let _lock = DirLock::acquire(&cli.out).map_err(CmdError::Runtime)?;
    let ctx = Ctx {
        config,
        out_dir: cli.out.clone(),
    };

    let result = match cli.command {
        Command::Build => commands::build::run(&ctx),
        Command::Run => commands::run::run(&ctx),
        Command::Ablate { which } => commands::ablate::run(&ctx, which),
        Command::Plot => commands::plot::run(&ctx),
    };
    result.map_err(CmdError::Runtime)
}
