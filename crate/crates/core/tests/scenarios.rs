use std::path::PathBuf;

use adaptsim::engine::Mode;
use adaptsim::harness::{compare_modes, run_scenario_file, RunOptions, RunReport, Scenario};
use adaptsim::trace::{digest, parse_jsonl};

fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn scenario_files() -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(scenarios_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files
}

#[test]
fn shipped_scenarios_validate() {
    let files = scenario_files();
    assert_eq!(files.len(), 5);
    for path in files {
        let s = Scenario::load(&path).unwrap_or_else(|e| panic!("{e}"));
        assert_eq!(path.file_stem().unwrap().to_str().unwrap(), s.name);
        assert!(s.goal.is_some(), "{} has no goal", s.name);
    }
}

#[test]
fn outputs_on_disk_reproduce_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenarios_dir().join("bluegreen-switch.json");
    let out = run_scenario_file(&path, RunOptions::new(3, Mode::Level), Some(dir.path())).unwrap();

    let text = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    let records = parse_jsonl(&text).unwrap();
    assert_eq!(records, out.records);
    assert_eq!(digest(&records), out.report.trace_digest);

    let report: RunReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report, RunReport::from_records(&records));
    assert_eq!(report, out.report);
}

#[test]
fn until_shortens_the_horizon() {
    let path = scenarios_dir().join("lowpower-basic.json");
    let out = run_scenario_file(&path, RunOptions::new(1, Mode::Level).until(100), None).unwrap();
    assert_eq!(out.report.end - out.report.start, 100);
    assert!(out.records.iter().all(|r| r.t <= out.report.end));
    // the third OOM is at +250, so nothing has flipped yet
    assert!(!out.report.converged);
}

#[test]
fn controller_subset_leaves_the_rest_idle() {
    let path = scenarios_dir().join("rainbow-scaling.json");
    let out = run_scenario_file(&path, RunOptions::new(1, Mode::Level).controllers(["rainbow"]), None).unwrap();
    assert!(out
        .records
        .iter()
        .all(|r| !(r.kind == "reconcile" && r.subject == "lowpower")));
    assert!(out.records.iter().any(|r| r.kind == "adaptation"));
}

#[test]
fn fault_free_scenario_agrees_across_modes() {
    let s = Scenario::load(&scenarios_dir().join("lowpower-basic.json")).unwrap();
    let cmp = compare_modes(&s, &[1, 2], None).unwrap();
    assert_eq!(cmp.level.converged, 2);
    assert_eq!(cmp.event.converged, 2);
    assert!(cmp.per_seed.iter().all(|p| p.final_states_equal));
}

#[test]
fn faulty_scenario_separates_the_modes() {
    let s = Scenario::load(&scenarios_dir().join("lowpower-faulty.json")).unwrap();
    let cmp = compare_modes(&s, &[1, 2, 3], None).unwrap();
    assert_eq!(cmp.level.convergence_rate, 1.0);
    assert!(cmp.event.convergence_rate < 1.0);
    assert!(cmp.per_seed.iter().any(|p| !p.final_states_equal));
}
