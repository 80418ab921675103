use std::path::PathBuf;
use std::process::ExitCode;

use adaptsim::engine::Mode;
use adaptsim::harness::{compare_modes, run_scenario, RunOptions, Scenario};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

/// Deterministic simulator for self-adaptive microservice control.
#[derive(Debug, Parser)]
#[command(name = "adaptsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and write trace.jsonl and report.json.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "level")]
        mode: Mode,
        /// Seconds of logical time to simulate (defaults to the scenario's duration).
        #[arg(long)]
        until: Option<i64>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of the configured controllers.
        #[arg(long, value_delimiter = ',')]
        controllers: Option<Vec<String>>,
    },
    /// Run every seed in level and in event mode and compare.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        until: Option<i64>,
        /// Also write comparison.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and check a scenario without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADAPTSIM_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            mode,
            until,
            out,
            controllers,
        } => {
            let s = Scenario::load(&scenario)?;
            log::info!("running {} seed={seed} mode={mode}", s.name);
            let options = RunOptions {
                seed,
                mode,
                until_seconds: until,
                controllers,
            };
            let output = run_scenario(&s, options)?;
            output.write_to(&out)?;
            log::info!("wrote {} trace records to {}", output.records.len(), out.display());
            println!("{}", serde_json::to_string_pretty(&output.report)?);
        }
        Command::Compare {
            scenario,
            seeds,
            until,
            out,
        } => {
            let s = Scenario::load(&scenario)?;
            log::info!("comparing modes on {} over {} seeds", s.name, seeds.len());
            let report = compare_modes(&s, &seeds, until)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                std::fs::write(dir.join("comparison.json"), format!("{text}\n"))?;
            }
            println!("{text}");
        }
        Command::Validate { scenario } => {
            let s = Scenario::load(&scenario)?;
            println!("ok: {} ({})", s.name, scenario.display());
        }
    }
    Ok(())
}
