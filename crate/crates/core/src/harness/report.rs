//! Run reports as pure folds over trace records, and the level/event
//! comparison.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::scenario::Scenario;
use super::world::{RunOptions, Simulation};
use super::HarnessError;
use crate::clock::EpochSeconds;
use crate::engine::Mode;
use crate::sim::AdaptationState;
use crate::trace::{digest, TraceRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub mode: Option<Mode>,
    pub start: EpochSeconds,
    pub end: EpochSeconds,
    pub converged: bool,
    /// Seconds from start until the goal last became true; null when it
    /// does not hold at the end.
    pub convergence_time_seconds: Option<i64>,
    pub reconcile_rounds: u64,
    pub client_error_count: u64,
    pub requests: u64,
    pub adaptations: u64,
    pub injected_adapt_failures: u64,
    pub dropped_deliveries: u64,
    pub controller_restarts: u64,
    pub per_pod_final_adaptation: BTreeMap<String, AdaptationState>,
    pub trace_digest: String,
}

impl RunReport {
    /// Recomputes every field from the records alone.
    pub fn from_records(records: &[TraceRecord]) -> RunReport {
        let mut r = RunReport {
            scenario: String::new(),
            seed: 0,
            mode: None,
            start: 0,
            end: 0,
            converged: false,
            convergence_time_seconds: None,
            reconcile_rounds: 0,
            client_error_count: 0,
            requests: 0,
            adaptations: 0,
            injected_adapt_failures: 0,
            dropped_deliveries: 0,
            controller_restarts: 0,
            per_pod_final_adaptation: BTreeMap::new(),
            trace_digest: digest(records),
        };
        let mut met_since: Option<EpochSeconds> = None;
        for rec in records {
            let d = &rec.detail;
            match rec.kind.as_str() {
                "run_start" => {
                    r.scenario = rec.subject.clone();
                    r.seed = d["seed"].as_u64().unwrap_or(0);
                    r.mode = serde_json::from_value(d["mode"].clone()).ok();
                    r.start = d["start"].as_i64().unwrap_or(rec.t);
                    r.end = d["end"].as_i64().unwrap_or(rec.t);
                }
                "goal" => {
                    if d["met"].as_bool() == Some(true) {
                        met_since = Some(rec.t);
                    } else {
                        met_since = None;
                    }
                }
                "reconcile" => r.reconcile_rounds += 1,
                "request" => {
                    r.requests += 1;
                    if d["outcome"] == "no-backends" {
                        r.client_error_count += 1;
                    }
                }
                "pod_created" => {
                    let flavor = d["flavor"].as_str().unwrap_or_default().to_string();
                    r.per_pod_final_adaptation.insert(
                        rec.subject.clone(),
                        AdaptationState {
                            low_power_enabled: false,
                            active_flavor: flavor,
                            cache_enabled: false,
                        },
                    );
                }
                "adapted" => {
                    r.adaptations += 1;
                    if let Ok(state) = serde_json::from_value::<AdaptationState>(d["state"].clone()) {
                        r.per_pod_final_adaptation.insert(rec.subject.clone(), state);
                    }
                }
                "pod_deleted" => {
                    r.per_pod_final_adaptation.remove(&rec.subject);
                }
                "adapt_failed" => r.injected_adapt_failures += 1,
                "delivery_dropped" => r.dropped_deliveries += 1,
                "controller_restart" => r.controller_restarts += 1,
                _ => {}
            }
        }
        r.converged = met_since.is_some();
        r.convergence_time_seconds = met_since.map(|t| t - r.start);
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SeedOutcome {
    pub converged: bool,
    pub convergence_time_seconds: Option<i64>,
    pub reconcile_rounds: u64,
    pub trace_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SeedComparison {
    pub seed: u64,
    pub level: SeedOutcome,
    pub event: SeedOutcome,
    pub final_states_equal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ModeSummary {
    pub runs: usize,
    pub converged: usize,
    pub convergence_rate: f64,
    /// Over converged runs only.
    pub mean_convergence_time_seconds: Option<f64>,
}

impl ModeSummary {
    fn of<'a>(outcomes: impl Iterator<Item = &'a SeedOutcome>) -> ModeSummary {
        let outcomes: Vec<_> = outcomes.collect();
        let times: Vec<i64> = outcomes.iter().filter_map(|o| o.convergence_time_seconds).collect();
        let runs = outcomes.len();
        let converged = outcomes.iter().filter(|o| o.converged).count();
        ModeSummary {
            runs,
            converged,
            convergence_rate: if runs == 0 { 0.0 } else { converged as f64 / runs as f64 },
            mean_convergence_time_seconds: if times.is_empty() {
                None
            } else {
                Some(times.iter().sum::<i64>() as f64 / times.len() as f64)
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ComparisonReport {
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub level: ModeSummary,
    pub event: ModeSummary,
    pub per_seed: Vec<SeedComparison>,
}

fn outcome(report: &RunReport) -> SeedOutcome {
    SeedOutcome {
        converged: report.converged,
        convergence_time_seconds: report.convergence_time_seconds,
        reconcile_rounds: report.reconcile_rounds,
        trace_digest: report.trace_digest.clone(),
    }
}

/// Runs every seed under both modes with the same faults.
pub fn compare_modes(
    scenario: &Scenario,
    seeds: &[u64],
    until_seconds: Option<i64>,
) -> Result<ComparisonReport, HarnessError> {
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let mut runs: Vec<(RunReport, Value)> = Vec::new();
        for mode in [Mode::Level, Mode::Event] {
            let options = RunOptions {
                until_seconds,
                ..RunOptions::new(seed, mode)
            };
            let out = Simulation::new(scenario.clone(), options)?.finish();
            runs.push((out.report, out.final_state));
        }
        per_seed.push(SeedComparison {
            seed,
            level: outcome(&runs[0].0),
            event: outcome(&runs[1].0),
            final_states_equal: runs[0].1 == runs[1].1,
        });
    }
    Ok(ComparisonReport {
        scenario: scenario.name.clone(),
        seeds: seeds.to_vec(),
        level: ModeSummary::of(per_seed.iter().map(|s| &s.level)),
        event: ModeSummary::of(per_seed.iter().map(|s| &s.event)),
        per_seed,
    })
}
