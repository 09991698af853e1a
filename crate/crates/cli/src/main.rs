//! `mlah` — train, evaluate and analyze hierarchical agents under scheduled
//! observation attacks.
//!
//! Exit codes: 0 on success, 2 for configuration or checkpoint problems,
//! 3 for numerical failures (diverged training), 1 for anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mlah_core::harness::{
    analyze_file, emit_plots, env_overrides, load_checkpoint, run, sweep_file,
    trainer_from_checkpoint, ExperimentConfig,
};
use mlah_core::{Real, Result};

#[derive(Parser)]
#[command(name = "mlah", version, about = "Hierarchical RL vs scheduled observation attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train each configured seed, writing run logs and checkpoints.
    Train {
        /// Flat key=value config file (see the harness module docs).
        #[arg(long)]
        config: PathBuf,
        /// Train only this seed instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attack-free deterministic evaluation of a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Evaluate the chain closed forms for one parameter file.
    Analyze {
        /// Chain parameter file (m, n, v0, v1, gamma, alpha, ...).
        #[arg(long)]
        params: PathBuf,
        /// Output directory (defaults to the parameter file's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expand a parameter grid and analyze every point.
    Sweep {
        /// Grid file: chain parameters with comma-separated value lists.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate plot-ready CSV/SVG artifacts from a run log.
    EmitPlots {
        #[arg(long)]
        log: PathBuf,
    },
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train { config, seed } => {
            let mut cfg = ExperimentConfig::<Real>::from_file(&config)?;
            cfg.apply_all(&env_overrides(std::env::vars()))?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let artifacts = run(&cfg)?;
            for a in &artifacts {
                let last = a.reports.last();
                println!(
                    "seed {}: {} iterations, final eval return {}, log {}",
                    a.seed,
                    a.reports.len(),
                    last.map_or("-".to_string(), |r| format!("{}", r.eval_return)),
                    a.log_path.display()
                );
            }
            Ok(())
        }
        Command::Eval { checkpoint, episodes } => {
            let ck = load_checkpoint::<Real>(&checkpoint)?;
            let mut trainer = trainer_from_checkpoint(&ck)?;
            let mean_return = trainer.evaluate(episodes)?;
            println!(
                "checkpoint {} (iteration {}): mean return {mean_return} over {episodes} episodes",
                checkpoint.display(),
                ck.iteration
            );
            Ok(())
        }
        Command::Analyze { params, out } => {
            let (report, csv_path, json_path) = analyze_file::<Real>(&params, out.as_deref())?;
            println!("p0 = {}, p1 = {}", report.p0, report.p1);
            println!("E_unc = {}, E_con = {}", report.e_unc, report.e_con);
            println!(
                "delta_con = {}, delta_unc = {}",
                report.delta_con, report.delta_unc
            );
            println!(
                "lemma1 (E_unc < E_con): {}, lemma2 (delta_con < delta_unc): {}",
                report.lemma1_holds, report.lemma2_holds
            );
            println!(
                "C_min = {}, epsilon_tilde = {}",
                report.c_min, report.epsilon_tilde
            );
            if let Some(mc) = report.mc_p0 {
                println!("monte-carlo p0 = {mc}");
            }
            println!("wrote {}", csv_path.display());
            println!("wrote {}", json_path.display());
            Ok(())
        }
        Command::Sweep { grid, out } => {
            let (count, csv_path, json_path) = sweep_file::<Real>(&grid, out.as_deref())?;
            println!("analyzed {count} grid points");
            println!("wrote {}", csv_path.display());
            println!("wrote {}", json_path.display());
            Ok(())
        }
        Command::EmitPlots { log } => {
            for path in emit_plots::<Real>(&log)? {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
