use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aesp_core::config::ExperimentConfig;
use aesp_core::run::{self, AblationAxis, RunSummary};
use aesp_core::{AespError, Result};
use clap::{Parser, Subcommand, ValueEnum};

/// Adapter-enhanced semantic prompting for class-incremental learning.
#[derive(Debug, Parser)]
#[command(name = "aesp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every seed of a config; resumes a partially completed run.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recompute metrics of a run directory from its checkpoints.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Route every query to its ground-truth task.
        #[arg(long)]
        oracle_routing: bool,
        /// Also write the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired runs differing in one switch, with a side-by-side table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Precomputed text-embedding caches.
    EmbedCache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Debug, Subcommand)]
enum CacheAction {
    /// Encode every template a config needs into a cache directory.
    Build {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Axis {
    Adapter,
    SPrompt,
    Iqkm,
}

impl From<Axis> for AblationAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Adapter => AblationAxis::Adapter,
            Axis::SPrompt => AblationAxis::SPrompt,
            Axis::Iqkm => AblationAxis::Iqkm,
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(s: &RunSummary) {
    println!("run: {}", s.run_dir.display());
    for m in &s.seeds {
        let ff = m.forgetting.map(|f| format!("{f:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "seed {}: sessions {}/{} last_acc {:.4} avg_acc {:.4} ff {} selection {:.4}",
            m.seed,
            m.sessions_completed,
            m.num_tasks,
            m.last_acc,
            m.avg_acc,
            ff,
            m.selection_accuracy.get(&m.routing).copied().unwrap_or(f64::NAN),
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            print_summary(&run::train(&cfg)?);
        }
        Command::Eval {
            run: dir,
            oracle_routing,
            out,
        } => {
            let summary = run::eval(&dir, oracle_routing)?;
            let text = serde_json::to_string_pretty(&summary)?;
            if let Some(path) = out {
                std::fs::write(&path, format!("{text}\n")).map_err(|e| AespError::io(&path, e))?;
            }
            println!("{text}");
        }
        Command::Ablate { config, axis } => {
            let cfg = load_config(&config)?;
            print!("{}", run::ablate(&cfg, axis.into())?.table());
        }
        Command::EmbedCache {
            action: CacheAction::Build { config, out },
        } => {
            let cfg = load_config(&config)?;
            let added = run::build_embed_cache(&cfg, &out)?;
            println!("{added} new embeddings written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
