//! Scenario runner: loads a scenario, wires the configured controllers,
//! drives the simulation on the logical clock, injects faults and folds the
//! resulting trace into a report.

mod report;
mod scenario;
mod world;

use std::path::Path;

use thiserror::Error;

pub use report::{compare_modes, ComparisonReport, ModeSummary, RunReport, SeedComparison, SeedOutcome};
pub use scenario::{
    ControllersDecl, DeploymentDecl, FaultSpec, Goal, HpaDecl, ResourceDecl, RestartDecl, Scenario, ScriptAction,
    ScriptStep, ScriptedEvent, ServiceDecl, When, CONTROLLER_NAMES, DEFAULT_START,
};
pub use world::{IdempotenceProbe, RunOptions, Simulation};

use crate::trace::TraceRecord;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ScenarioError {
    #[error("{origin}: {message}")]
    Io { origin: String, message: String },
    #[error("{origin}:{line}:{column}: at `{path}`: {message}")]
    Parse {
        origin: String,
        line: usize,
        column: usize,
        path: String,
        message: String,
    },
    #[error("{origin}: invalid scenario:\n  {}", errors.join("\n  "))]
    Invalid { origin: String, errors: Vec<String> },
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("setting up {what}: {message}")]
    Setup { what: String, message: String },
    #[error("unknown controller {0:?} (configured: {1})")]
    UnknownController(String, String),
    #[error("writing outputs: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<TraceRecord>,
    pub report: RunReport,
    pub final_state: serde_json::Value,
}

impl RunOutput {
    /// Writes `trace.jsonl` and `report.json` into `dir`, creating it.
    pub fn write_to(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("trace.jsonl"), crate::trace::to_jsonl(&self.records))?;
        let report = serde_json::to_string_pretty(&self.report).expect("report serializes");
        std::fs::write(dir.join("report.json"), report + "\n")?;
        Ok(())
    }
}

/// Runs a parsed scenario to its horizon.
pub fn run_scenario(scenario: &Scenario, options: RunOptions) -> Result<RunOutput, HarnessError> {
    let mut sim = Simulation::new(scenario.clone(), options)?;
    sim.run();
    Ok(sim.finish())
}

/// Loads, runs and writes outputs in one go.
pub fn run_scenario_file(path: &Path, options: RunOptions, out: Option<&Path>) -> Result<RunOutput, HarnessError> {
    let scenario = Scenario::load(path)?;
    let output = run_scenario(&scenario, options)?;
    if let Some(dir) = out {
        output.write_to(dir)?;
    }
    Ok(output)
}

#[cfg(test)]
mod tests;
