//! `t3kit` — generate, train, evaluate, predict, and report.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 1 on runtime
//! failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use t3kit_core::config::RunConfig;
use t3kit_core::error::Error;
use t3kit_core::harness;

#[derive(Parser)]
#[command(name = "t3kit", version, about = "Video-to-image action recognition and co-attention VQA toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed (applies to generation and training).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset described by [synth] into the data root.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the configured task; optionally resume from a checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Resume training from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score the configured dataset with one or more checkpoints.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint(s) to ensemble (repeatable).
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
    },
    /// Emit per-clip CSV or per-frame JSONL predictions.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint(s) to ensemble (repeatable).
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
    },
    /// Render loss curves and metric bars from a run directory.
    Report {
        /// Directory holding train_log.csv and/or metrics.json.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.optim.seed = seed;
        if let Some(s) = &mut cfg.synth.recognition {
            s.seed = seed;
        }
        if let Some(s) = &mut cfg.synth.vqa {
            s.seed = seed;
        }
    }
    Ok(cfg)
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::Generate { common } => {
            let cfg = load_config(&common)?;
            harness::cmd_generate(&cfg)?;
            println!("dataset written to {}", cfg.data.root.display());
        }
        Command::Train { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let outcome = harness::cmd_train::<f32>(&cfg, &common.out, checkpoint.as_deref())?;
            println!(
                "trained {} steps; final loss {:.6}; checkpoint {}",
                cfg.optim.steps,
                outcome.final_total_loss,
                outcome.checkpoint.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let report = harness::cmd_eval::<f32>(&cfg, &checkpoint, &common.out)?;
            print!("{}", report.to_table());
            println!("metrics written to {}", common.out.join("metrics.json").display());
        }
        Command::Predict { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let path = harness::cmd_predict::<f32>(&cfg, &checkpoint, &common.out)?;
            println!("predictions written to {}", path.display());
        }
        Command::Report { out } => {
            let written = harness::cmd_report(&out)?;
            for p in written {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
