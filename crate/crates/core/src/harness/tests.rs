use serde_json::json;

use super::*;
use crate::engine::Mode;

fn minimal() -> serde_json::Value {
    json!({
        "name": "tiny",
        "durationSeconds": 120,
        "profiles": {"webui": {"baselineMemoryBytes": 100, "latencyMs": 50.0}},
        "deployments": [{
            "name": "webui",
            "replicas": 2,
            "labels": {"app": "webui"},
            "template": {"image": "webui:1", "memoryLimitBytes": 1000}
        }],
        "services": [{"name": "webui", "selector": {"app": "webui"}}],
        "workloads": [{"client": "c", "service": "webui", "ratePerSecond": 2.0}],
        "resources": [{"kind": "TeaStoreConfig", "name": "teastore-config",
                       "spec": {"lowPowerAdaptation": false, "timeInterval": 300}}],
        "controllers": {"lowpower": {"targetDeployment": "webui"}},
        "faults": {"scriptedEvents": [
            {"eventType": "OutOfMemory", "sourcePod": "webui-0", "atOffsetSeconds": 10},
            {"eventType": "OutOfMemory", "sourcePod": "webui-0", "atOffsetSeconds": 20},
            {"eventType": "OutOfMemory", "sourcePod": "webui-1", "atOffsetSeconds": 30}
        ]},
        "goal": {"type": "allPodsLowPower", "deployment": "webui"}
    })
}

fn parse(v: &serde_json::Value) -> Result<Scenario, ScenarioError> {
    Scenario::parse(&serde_json::to_string_pretty(v).unwrap(), "tiny.json")
}

#[test]
fn schema_errors_carry_path_and_location() {
    let mut v = minimal();
    v["deployments"][0]["replicas"] = json!("two");
    match parse(&v).unwrap_err() {
        ScenarioError::Parse { path, line, .. } => {
            assert_eq!(path, "deployments[0].replicas");
            assert!(line > 1);
        }
        other => panic!("unexpected {other:?}"),
    }
    let mut v = minimal();
    v["faults"]["watchDrop"] = json!(0.5);
    let err = parse(&v).unwrap_err().to_string();
    assert!(err.contains("faults") && err.contains("watchDrop"), "{err}");
}

#[test]
fn dangling_references_are_reported_by_field() {
    let mut v = minimal();
    v["controllers"]["lowpower"]["targetDeployment"] = json!("nope");
    v["workloads"][0]["service"] = json!("ghost");
    v["faults"]["adaptCallFailureProbability"] = json!(1.5);
    v["faults"]["controllerRestarts"] = json!([{"controller": "bluegreen", "atOffsetSeconds": 5}]);
    let ScenarioError::Invalid { errors, .. } = parse(&v).unwrap_err() else {
        panic!()
    };
    let joined = errors.join("\n");
    for needle in [
        "controllers.lowpower.targetDeployment",
        "workloads[0].service",
        "faults.adaptCallFailureProbability",
        "faults.controllerRestarts[0].controller",
    ] {
        assert!(joined.contains(needle), "missing {needle} in\n{joined}");
    }
}

#[test]
fn level_run_converges_and_report_is_a_fold_of_the_trace() {
    let s = parse(&minimal()).unwrap();
    let out = run_scenario(&s, RunOptions::new(1, Mode::Level)).unwrap();
    assert!(out.report.converged);
    assert_eq!(out.report.convergence_time_seconds, Some(30));
    assert_eq!(out.report.client_error_count, 0);
    assert!(out
        .report
        .per_pod_final_adaptation
        .values()
        .all(|a| a.low_power_enabled));
    let text = crate::trace::to_jsonl(&out.records);
    let reparsed = crate::trace::parse_jsonl(&text).unwrap();
    assert_eq!(RunReport::from_records(&reparsed), out.report);
}

#[test]
fn event_mode_with_total_loss_never_converges() {
    let mut v = minimal();
    v["faults"]["watchDropProbability"] = json!(1.0);
    let s = parse(&v).unwrap();
    let out = run_scenario(&s, RunOptions::new(1, Mode::Event)).unwrap();
    assert!(!out.report.converged);
    assert_eq!(out.report.reconcile_rounds, 0);
}

#[test]
fn same_inputs_same_digest() {
    let s = parse(&minimal()).unwrap();
    let a = run_scenario(&s, RunOptions::new(9, Mode::Level)).unwrap();
    let b = run_scenario(&s, RunOptions::new(9, Mode::Level)).unwrap();
    assert_eq!(a.report.trace_digest, b.report.trace_digest);
}

#[test]
fn fault_free_modes_agree() {
    let s = parse(&minimal()).unwrap();
    let cmp = compare_modes(&s, &[1, 2], None).unwrap();
    assert_eq!(cmp.level.converged, 2);
    assert_eq!(cmp.event.converged, 2);
    assert!(cmp.per_seed.iter().all(|p| p.final_states_equal));
}

#[test]
fn second_reconcile_writes_nothing_at_any_second() {
    let s = parse(&minimal()).unwrap();
    let mut sim = Simulation::new(s.clone(), RunOptions::new(3, Mode::Level)).unwrap();
    for t in s.start_epoch_seconds..=s.end() {
        sim.run_until(t);
        for p in sim.idempotence_probe() {
            assert_eq!(p.second_writes, 0, "{p:?}");
        }
    }
}

#[test]
fn unknown_controller_is_rejected() {
    let s = parse(&minimal()).unwrap();
    let err = Simulation::new(s, RunOptions::new(1, Mode::Level).controllers(["rainbow"])).unwrap_err();
    assert!(matches!(err, HarnessError::UnknownController(..)));
}
