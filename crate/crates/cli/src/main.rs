use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use touchhand_cli::*;

#[derive(Parser)]
#[command(name = "touchhand", version, about = "Two-hand pose tracking from capacitive frames")]
struct Cli {
    /// TOML run configuration; defaults are used for anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, overriding the config's synth and train seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Train the estimator on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Run estimator, decoding and IK over a dataset's sequences.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score tracked streams against ground truth.
    Eval {
        /// Directory holding `*.track.jsonl` files.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Use `*.tri.jsonl` files from this directory as ground truth.
        #[arg(long)]
        triangulated: Option<PathBuf>,
    },
    /// Reconstruct 3D joints from the dataset's 2D camera detections.
    Triangulate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of every op.
    Gradcheck,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?.with_overrides(cli.seed, cli.deterministic);
    let out = &cli.out;
    match cli.command {
        Command::Synth => {
            let index = cmd_synth(&cfg, out)?;
            println!("{} sequences written to {}", index.sequences.len(), out.display());
        }
        Command::Train { data } => {
            let s = cmd_train(&cfg, &data, out)?;
            println!(
                "{} epochs on {} sequences in {:.1} s; loss {:.4} -> {:.4}",
                s.epochs, s.sequences, s.seconds, s.initial_loss, s.final_loss
            );
        }
        Command::Track { checkpoint, data } => {
            println!("{:<12} {:>7} {:>14} {:>8}", "sequence", "frames", "estimator ms", "IK ms");
            for s in cmd_track(&cfg, &checkpoint, &data, out)? {
                println!(
                    "{:<12} {:>7} {:>14.2} {:>8.2}",
                    s.sequence, s.frames, s.mean_estimator_ms, s.mean_ik_ms
                );
            }
        }
        Command::Eval { pred, data, triangulated } => {
            let r = cmd_eval(&cfg, &pred, &data, triangulated.as_deref(), out)?;
            print!("{}", r.to_csv());
        }
        Command::Triangulate { data } => {
            for s in cmd_triangulate(&cfg, &data, out)? {
                println!(
                    "{}: {} camera frames, {} hands, mean residual {:.3} mm",
                    s.sequence, s.camera_frames, s.hands, s.mean_residual_mm
                );
            }
        }
        Command::Gradcheck => {
            let checks = cmd_gradcheck(&cfg, out)?;
            for c in &checks {
                println!(
                    "{:<20} {:>5} seeds  worst {:.2e}  tol {:.0e}  redrawn {:>3}  {}",
                    c.op,
                    c.seeds,
                    c.worst,
                    c.tolerance,
                    c.redrawn,
                    if c.passed() { "PASS" } else { "FAIL" }
                );
            }
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.op.as_str()).collect();
            if !failed.is_empty() {
                bail!("gradient check failed for {}", failed.join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
