use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ibtpo_cli::commands;
use ibtpo_cli::config::{self, Backend, BackendKind, BaselineMode, RunConfig};
use ibtpo_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "ibtpo", version, about = "Tree-structured policy optimization experiments")]
struct Cli {
    /// TOML run configuration. Takes precedence over --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset used when no --config is given (desk, full_scale).
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    baseline: Option<BaselineMode>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sampling, advantage and update loop.
    Train,
    /// Sample one tree and write its snapshot.
    Sample {
        #[arg(long)]
        problem: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Offline IB-Score evaluation of a policy checkpoint.
    EvalIbscore {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate only the first N problems.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run a brute-force oracle suite.
    Oracle { suite: String },
    /// Convert a tree snapshot to a per-node CSV table.
    ExportTree {
        snapshot: PathBuf,
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => config::preset(&cli.preset)?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(b) = cli.baseline {
        cfg.baseline_mode = b;
    }
    match (cli.backend, &cfg.backend) {
        (Some(BackendKind::Sim), _) => cfg.backend = Backend::Sim,
        (Some(BackendKind::Remote), Backend::Sim) => {
            return Err(CliError::Usage(
                "--backend remote needs a [backend.remote] section in the config file".into(),
            ))
        }
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut out = io::stdout().lock();
    match &cli.command {
        Command::Oracle { suite } => {
            let seed = cli.seed.unwrap_or(0);
            commands::oracle(suite, seed, &mut out).map(drop)
        }
        Command::ExportTree { snapshot, dest } => commands::export_tree(snapshot, dest.clone(), &mut out).map(drop),
        cmd => {
            let cfg = resolve(&cli)?;
            match cmd {
                Command::Train => commands::train(&cfg, &mut out).map(drop),
                Command::Sample { problem, checkpoint } => {
                    commands::sample(&cfg, problem, checkpoint.as_deref(), &mut out).map(drop)
                }
                Command::EvalIbscore { checkpoint, limit } => {
                    commands::eval_ibscore(&cfg, checkpoint.as_deref(), *limit, &mut out).map(drop)
                }
                Command::Config => {
                    cfg.validate()?;
                    print!("{}", cfg.to_toml());
                    Ok(())
                }
                Command::Oracle { .. } | Command::ExportTree { .. } => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
