//! `tap`: synthetic few-shot segmentation benchmark with test-time
//! encoder adaptation.
//!
//! Subcommands: `gen-data`, `meta-train`, `eval`, `sweep`,
//! `oneshot-study`. All take `--config <file>` (flat `key = value` text;
//! run `tap keys` for the full reference). Exit codes: 0 success,
//! 2 configuration error, 3 data error, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tap_core::config::{key_reference_table, RunConfig};
use tap_core::driver;
use tap_core::error::Error;

#[derive(Parser)]
#[command(name = "tap", version, about = "few-shot segmentation with test-time encoder adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file (flat `key = value` text).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overwrite a non-empty output directory (gen-data).
    #[arg(long, global = true)]
    force: bool,

    /// Override dataset.seed and meta.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override out.dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic fold-structured dataset.
    GenData,
    /// Meta-train one checkpoint per fold on its base classes.
    MetaTrain,
    /// Evaluate methods across folds; writes report.csv/json + trace.jsonl.
    Eval,
    /// Rank-iteration sweep; writes sweep.csv/svg + params.csv.
    Sweep,
    /// 1-shot vs 2-shot iteration curves; writes oneshot.csv.
    OneshotStudy,
    /// Print the configuration key reference.
    Keys,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse_file(path)?,
        None => RunConfig::default_config(),
    };
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
        cfg.meta.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    if matches!(cli.command, Command::Keys) {
        print!("{}", key_reference_table());
        return Ok(());
    }
    let cfg = load_config(cli)?;
    match cli.command {
        Command::GenData => {
            let out = driver::cmd_gen_data(&cfg, cli.force)?;
            println!("dataset written to {}", out.summary.out_dir.display());
            print!("{}", out.table);
        }
        Command::MetaTrain => {
            let out = driver::cmd_meta_train(&cfg)?;
            for (fold, losses, ckpt) in &out.folds {
                let first = losses.first().copied().unwrap_or(f64::NAN);
                let last = losses.last().copied().unwrap_or(f64::NAN);
                println!(
                    "fold {}: {} steps, loss {:.4} -> {:.4}, checkpoint {}",
                    fold,
                    losses.len(),
                    first,
                    last,
                    ckpt.display()
                );
            }
        }
        Command::Eval => {
            let out = driver::cmd_eval(&cfg)?;
            println!(
                "report: {} ({} rows); trace: {}",
                out.csv_path.display(),
                out.report.rows.len(),
                out.trace_path.display()
            );
            for row in &out.report.rows {
                match row.delta_vs_vanilla {
                    Some(d) => println!(
                        "  fold {} {:<10} mIoU {:.4} ({:+.4} vs vanilla)",
                        row.fold,
                        row.method.as_str(),
                        row.miou_mean,
                        d
                    ),
                    None => println!(
                        "  fold {} {:<10} mIoU {:.4}",
                        row.fold,
                        row.method.as_str(),
                        row.miou_mean
                    ),
                }
            }
        }
        Command::Sweep => {
            let out = driver::cmd_sweep(&cfg)?;
            println!(
                "sweep: {} rows -> {}, {}, {}",
                out.rows.len(),
                out.csv_path.display(),
                out.svg_path.display(),
                out.params_path.display()
            );
        }
        Command::OneshotStudy => {
            let out = driver::cmd_oneshot_study(&cfg)?;
            println!("oneshot study: {} rows -> {}", out.rows.len(), out.csv_path.display());
        }
        Command::Keys => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
