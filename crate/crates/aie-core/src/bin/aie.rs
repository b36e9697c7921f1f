//! Command-line entry point: generate synthetic auction logs, train models,
//! evaluate checkpoints, compare runs, and sweep hyperparameters.

use aie_core::data::Dataset;
use aie_core::error::{AieError, Result};
use aie_core::metrics::MetricsToggles;
use aie_core::model::Checkpoint;
use aie_core::runner::{self, RunConfig, RunResult};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "aie",
    version,
    about = "Auction-information-enhanced CTR prediction experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic auction logs (train/valid/test + unbiased holdout).
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model per configured seed, writing checkpoints + logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Retrain even if a checkpoint already exists.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on a TSV log and emit a metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relative improvement of one stored run result over a baseline.
    Compare {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Grid-search the config's sweep section; each point is a full run.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out, seed } => {
            let config = RunConfig::from_path(config)?;
            let summary = runner::generate_to_dir(&config, &out, seed)?;
            for (name, n) in &summary.rows {
                println!("{name}: {n} rows");
            }
            println!("seed {} -> {}", summary.seed, out.display());
            Ok(())
        }
        Command::Train { config, force } => {
            let config = RunConfig::from_path(config)?;
            for row in runner::train_only(&config, force)? {
                if row.skipped {
                    println!(
                        "seed {}: checkpoint exists, skipping (use --force to retrain)",
                        row.seed
                    );
                } else {
                    println!(
                        "seed {}: {} epoch(s), valid_auc {} -> {}",
                        row.seed,
                        row.epochs,
                        row.valid_auc
                            .map_or("-".to_string(), |v| format!("{v:.5}")),
                        row.checkpoint.display()
                    );
                }
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (params, encoders) = ck.restore()?;
            let dataset = Dataset::load_tsv_frozen(&data, &ck.schema, &encoders)?;
            let report = runner::evaluate(&params, &dataset, &MetricsToggles::default())?;
            let body = serde_json::to_string_pretty(&report).map_err(|e| AieError::Json {
                context: "serialize metrics report".to_string(),
                msg: e.to_string(),
            })?;
            println!("{body}");
            if let Some(path) = out {
                std::fs::write(&path, &body)
                    .map_err(|e| AieError::io(path.display().to_string(), e))?;
            }
            Ok(())
        }
        Command::Compare { result, baseline } => {
            let measured = RunResult::load(&result)?;
            let base = RunResult::load(&baseline)?;
            let report = runner::compare(&measured, &base)?;
            print!("{}", report.table("baseline", "measured"));
            Ok(())
        }
        Command::Sweep { config, force } => {
            let config = RunConfig::from_path(config)?;
            let summary = runner::sweep(&config, force)?;
            for (i, p) in summary.points.iter().enumerate() {
                let marker = if i == summary.best { "*" } else { " " };
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.5}"));
                println!(
                    "{marker} {:?} valid_auc={} test_auc={} [{}]",
                    p.assignment,
                    fmt(p.valid_auc),
                    fmt(p.test_auc),
                    p.config_hash
                );
            }
            Ok(())
        }
    }
}
