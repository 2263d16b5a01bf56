use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use exitprune::runner::{
    compare_runs, emit_reports, load_checkpoint, run, Approach, ExperimentConfig, RunOptions, RunState,
};
use exitprune::{Error, Result};

/// Prune early-exit networks and compare pruning orderings.
#[derive(Parser)]
#[command(name = "exitprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a key=value config file.
    Run {
        config: PathBuf,
        /// 1 = prune everything jointly, 2 = base network first, then heads.
        #[arg(long)]
        approach: Option<u8>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps without writing reports.
        #[arg(long, value_name = "N")]
        stop_after_steps: Option<u32>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Compare two completed run directories.
    Compare {
        run_1: PathBuf,
        run_2: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-emit reports from a checkpoint.
    Report {
        checkpoint: PathBuf,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            approach,
            seed,
            out,
            resume,
            stop_after_steps,
            quiet,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(a) = approach {
                cfg.approach = Approach::from_number(a)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let options = RunOptions {
                resume,
                stop_after_steps,
                verbose: !quiet,
            };
            let artifacts = run(cfg, &options)?;
            if artifacts.completed {
                println!("run complete: {}", artifacts.output_dir.display());
            } else {
                println!(
                    "stopped after {} steps: {}",
                    artifacts.state.steps_done,
                    artifacts.output_dir.display()
                );
            }
        }
        Command::Compare { run_1, run_2, out } => {
            let c = compare_runs(&run_1, &run_2, &out)?;
            print!("{}", c.summary);
        }
        Command::Report { checkpoint, out } => {
            let state = RunState::from_checkpoint(load_checkpoint(&checkpoint)?)?;
            let dir = match out {
                Some(d) => d,
                None => checkpoint
                    .parent()
                    .map(|p| p.to_path_buf())
                    .ok_or_else(|| Error::usage("checkpoint path has no parent directory"))?,
            };
            if !state.is_complete() {
                eprintln!("note: checkpoint is from an unfinished run; reporting its progress so far");
            }
            for path in emit_reports(&state, &dir)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\\', "\\\\").replace('"', "\\\"");
            eprintln!("error: kind={} message=\"{}\"", e.kind(), message);
            ExitCode::FAILURE
        }
    }
}
