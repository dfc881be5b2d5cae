use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use ivi_cli::{run_eval, run_oracle, run_train, ExperimentConfig, RunError};

#[derive(Parser)]
#[command(name = "ivi", version, about = "Variational inference with implicit distributions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train, snapshot and evaluate.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved snapshot.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write grid posteriors for the eval observations.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("config {}", path.display()))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    out.or_else(|| cfg.out.clone())
        .ok_or_else(|| anyhow!(RunError::Config("no output directory: pass --out or set `out`".into())))
}

fn print_diagnostics(diags: &[ivi_core::eval::Diagnostics]) {
    for d in diags {
        println!("{}", serde_json::to_string(d).expect("diagnostics serialize"));
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load(&config, cli.seed)?;
            let out = out_dir(&cfg, out)?;
            print_diagnostics(&run_train(&cfg, &out)?);
        }
        Command::Eval { config, params, out } => {
            let cfg = load(&config, cli.seed)?;
            let out = out_dir(&cfg, out)?;
            print_diagnostics(&run_eval(&cfg, &params, &out)?);
        }
        Command::Oracle { config, out } => {
            let cfg = load(&config, cli.seed)?;
            let out = out_dir(&cfg, out)?;
            let summary = run_oracle(&cfg, &out)?;
            for e in &summary.entries {
                println!("x={} correlation={:.6}", e.x, e.correlation);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<RunError>().map_or(2, RunError::exit_code);
            ExitCode::from(code)
        }
    }
}
