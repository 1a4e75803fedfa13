use std::path::PathBuf;
use std::process::ExitCode;

use attnpyr_cli::commands;
use attnpyr_cli::{CliResult, RunConfig};
use clap::{Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "attnpyr", version, about = "Attention pyramids for metric-learning retrieval")]
struct Cli {
    /// key = value config file, applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Shorthand for --set seed=N.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: runs/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint, loss log, manifest and eval snapshots.
    Train,
    /// Evaluate a checkpoint on the query/gallery splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep pyramid depth, radix and split/stacked mode.
    Ablate,
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        /// Scale one op's analytic gradient by 1.01 (negative control).
        #[arg(long, value_name = "OP")]
        corrupt: Option<String>,
    },
    /// Operation counts of the configured model and its no-attention baseline.
    Flops,
    /// Print every config key with its default and description.
    DumpDefaults,
    /// Generate the synthetic dataset on disk.
    Synth,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate => "ablate",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Flops => "flops",
            Command::DumpDefaults => "dump-defaults",
            Command::Synth => "synth",
        }
    }
}

fn print<T: Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_sets(&cli.sets)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    match &cli.command {
        Command::Train => {
            let o = commands::cmd_train(&cfg, &out)?;
            print(&serde_json::json!({
                "run_dir": o.run_dir,
                "steps": o.steps,
                "final_epoch_loss": o.epoch_loss.last(),
                "map": o.report.map,
                "rank1": o.report.rank1(),
                "rank5": o.report.rank(5),
            }))
        }
        Command::Eval { checkpoint } => print(&commands::cmd_eval(&cfg, checkpoint, &out)?),
        Command::Ablate => {
            let rows = commands::cmd_ablate(&cfg, &out)?;
            print!("{}", commands::ablation_csv(&rows));
            Ok(())
        }
        Command::Gradcheck { corrupt } => {
            let r = commands::cmd_gradcheck(&cfg, &out, corrupt.as_deref());
            if let Ok(report) = &r {
                print(report)?;
            }
            r.map(|_| ())
        }
        Command::Flops => print(&commands::cmd_flops(&cfg, &out)?),
        Command::DumpDefaults => {
            print!("{}", RunConfig::default().to_text(true));
            Ok(())
        }
        Command::Synth => print(&commands::cmd_synth(&cfg, &out)?),
    }
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
