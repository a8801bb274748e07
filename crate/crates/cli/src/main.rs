use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sicot_cli::commands::{cmd_attn, cmd_eval, cmd_gradcheck, cmd_synth, cmd_train};
use sicot_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "sicot", version, about = "Side-information co-training pipeline")]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key; applied after --config, in order.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Shorthand for --set seed=<u64>; applied last.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed manifest.
    Synth,
    /// Train on the manifest's train split; writes checkpoint, vocab and log.
    Train,
    /// Evaluate a checkpoint on the test split; writes the report.
    Eval,
    /// Finite-difference check of every operation and the full objective.
    Gradcheck,
    /// Show per-word attention weights for a title.
    Attn {
        title: String,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::Gradcheck => cmd_gradcheck(&cfg),
        Command::Attn { title } => cmd_attn(&cfg, title),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("sicot: {msg}");
            ExitCode::FAILURE
        }
    }
}
