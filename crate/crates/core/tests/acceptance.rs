//! End-to-end acceptance checks. Prints one PASS/FAIL line per check and
//! exits non-zero if any of them fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;

use adaptsim::engine::Mode;
use adaptsim::harness::{run_scenario, RestartDecl, RunOptions, Scenario, Simulation};
use adaptsim::rainbow::{Comparator, IndicationEvent, Matcher, SequencePattern, SymbolSpec};
use adaptsim::store::{Kind, Resource, Store};
use adaptsim::trace::TraceRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const SCENARIOS: [&str; 5] = [
    "lowpower-basic",
    "lowpower-faulty",
    "bluegreen-switch",
    "rainbow-scaling",
    "cop-slow-client",
];

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"));
    Scenario::load(&path).unwrap_or_else(|e| panic!("{e}"))
}

fn run(s: &Scenario, seed: u64, mode: Mode) -> adaptsim::harness::RunOutput {
    run_scenario(s, RunOptions::new(seed, mode)).expect("run")
}

fn of_type<'a>(records: &'a [TraceRecord], kind: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
    records.iter().filter(move |r| r.kind == kind)
}

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

// Three OOMs inside one window with the HPA at its maximum flip the spec at
// the third event; pushing the third one second past the window does not.
fn lowpower_trigger() -> Result<String, String> {
    let s = scenario("lowpower-basic");
    let start = s.start_epoch_seconds;
    let out = run(&s, 1, Mode::Level);
    let cfg = "TeaStoreConfig/default/teastore-config";
    let spec_writes: Vec<i64> = of_type(&out.records, "write")
        .filter(|r| r.subject == cfg && r.detail["write"] == "spec")
        .map(|r| r.t)
        .collect();
    ensure!(
        spec_writes == vec![start + 250],
        "spec writes at {spec_writes:?}, wanted [{}]",
        start + 250
    );
    let objects = &out.final_state["objects"];
    ensure!(
        objects[cfg]["spec"]["lowPowerAdaptation"] == true,
        "final spec {}",
        objects[cfg]["spec"]
    );
    let hpa = &objects["HorizontalPodAutoscaler/default/webui"];
    ensure!(
        hpa["status"]["currentReplicas"] == hpa["spec"]["maxReplicas"],
        "hpa not at max: {hpa}"
    );

    let mut late = s.clone();
    late.faults.scripted_events[2].at_offset_seconds = Some(311);
    late.faults.scripted_events[2].at_epoch_seconds = None;
    let out = run(&late, 1, Mode::Level);
    let cfg_state = &out.final_state["objects"][cfg];
    ensure!(
        cfg_state["spec"]["lowPowerAdaptation"] == false,
        "late third OOM still flipped the spec"
    );
    ensure!(
        cfg_state["status"]["outOfMemoryCount"] == 1 && cfg_state["status"]["epochStartTimeInterval"] == start + 311,
        "late status {}",
        cfg_state["status"]
    );
    Ok(format!(
        "flip at +250, no flip with third OOM at +311 (status {})",
        cfg_state["status"]
    ))
}

// Adapt calls fail half the time. Level mode retries on the requeue timer
// until every pod is adapted; event mode loses the edge.
fn lowpower_faulty() -> Result<String, String> {
    let s = scenario("lowpower-faulty");
    let mut level_ok = 0;
    let mut event_ok = 0;
    let mut worst = 0;
    for seed in 1..=10 {
        let out = run(&s, seed, Mode::Level);
        let all_low = !out.report.per_pod_final_adaptation.is_empty()
            && out
                .report
                .per_pod_final_adaptation
                .values()
                .all(|a| a.low_power_enabled);
        // attempts per pod: every failed call plus the successful one
        let mut attempts: BTreeMap<&str, u32> = BTreeMap::new();
        for r in out
            .records
            .iter()
            .filter(|r| r.kind == "adapted" || r.kind == "adapt_failed")
        {
            *attempts.entry(&r.subject).or_default() += 1;
        }
        let max = attempts.values().copied().max().unwrap_or(0);
        worst = worst.max(max);
        if out.report.converged && all_low && max <= 8 {
            level_ok += 1;
        }
        if run(&s, seed, Mode::Event).report.converged {
            event_ok += 1;
        }
    }
    ensure!(
        level_ok == 10,
        "level converged {level_ok}/10 (worst pod needed {worst} rounds)"
    );
    ensure!(event_ok < 10, "event converged {event_ok}/10");
    Ok(format!("level 10/10 (worst pod {worst} rounds), event {event_ok}/10"))
}

// At every second of every scenario, a second reconcile right after the
// first writes nothing.
fn idempotence() -> Result<String, String> {
    let mut probes = 0;
    for name in SCENARIOS {
        let s = scenario(name);
        for mode in [Mode::Level, Mode::Event] {
            let mut sim = Simulation::new(s.clone(), RunOptions::new(1, mode)).map_err(|e| e.to_string())?;
            let mut t = sim.now();
            while t <= sim.end() {
                sim.run_until(t);
                for p in sim.idempotence_probe() {
                    probes += 1;
                    ensure!(
                        p.second_writes == 0,
                        "{name} {mode}: {} on {} at +{} wrote {} on the second pass",
                        p.controller,
                        p.key,
                        p.at - s.start_epoch_seconds,
                        p.second_writes
                    );
                }
                t += 1;
            }
        }
    }
    Ok(format!("{probes} probes, 0 second-pass writes"))
}

// Restarting the low-power controller between the second and third OOM
// changes nothing observable.
fn restart() -> Result<String, String> {
    let s = scenario("lowpower-basic");
    let mut restarted = s.clone();
    restarted.faults.controller_restarts.push(RestartDecl {
        controller: "lowpower".into(),
        at_epoch_seconds: None,
        at_offset_seconds: Some(175),
    });
    for mode in [Mode::Level, Mode::Event] {
        let base = run(&s, 1, mode);
        let again = run(&restarted, 1, mode);
        ensure!(
            of_type(&again.records, "controller_restart").count() == 1,
            "{mode}: no restart recorded"
        );
        ensure!(
            base.final_state == again.final_state,
            "{mode}: final state differs after restart"
        );
        ensure!(again.report.converged, "{mode}: restarted run did not converge");
    }
    Ok("final state identical with restart at +175 (level and event)".into())
}

fn bluegreen() -> Result<String, String> {
    let s = scenario("bluegreen-switch");
    let out = run(&s, 1, Mode::Level);
    let rec = &out.records;
    ensure!(out.report.converged, "rollout did not complete");
    ensure!(
        out.report.client_error_count == 0,
        "{} client errors",
        out.report.client_error_count
    );

    let old = "recommender-blue";
    let deleted_at = of_type(rec, "write")
        .find(|r| r.subject == format!("Deployment/default/{old}") && r.detail["write"] == "delete")
        .map(|r| r.t)
        .ok_or("old deployment never deleted")?;
    let old_requests: BTreeSet<&str> = of_type(rec, "request")
        .filter(|r| r.detail["origin"]["deployment"] == old)
        .filter_map(|r| r.detail["id"].as_str())
        .collect();
    let old_pod = |p: &str| p.starts_with(&format!("{old}-"));
    let mut last_completion = i64::MIN;
    for r in rec {
        match r.kind.as_str() {
            "request_done" if old_pod(&r.subject) => last_completion = last_completion.max(r.t),
            "request" if old_requests.contains(r.detail["id"].as_str().unwrap_or("")) => {
                last_completion = last_completion.max(r.detail["completesAt"].as_i64().unwrap_or(i64::MAX))
            }
            _ => {}
        }
    }
    ensure!(
        deleted_at > last_completion,
        "deleted at {deleted_at}, last old completion at {last_completion}"
    );

    let launched = rec
        .iter()
        .position(|r| r.kind == "reconcile" && r.detail.get("launched").is_some())
        .ok_or("no launch")?;
    let switched = rec
        .iter()
        .position(|r| r.kind == "reconcile" && r.detail.get("switched").is_some())
        .ok_or("no switch")?;
    let training: Vec<&TraceRecord> = rec[launched..switched].iter().filter(|r| r.kind == "request").collect();
    let from_old = training
        .iter()
        .filter(|r| r.detail["origin"]["deployment"] == old)
        .count();
    ensure!(!training.is_empty(), "no requests during training");
    ensure!(
        from_old == training.len(),
        "{from_old}/{} training responses from the old color",
        training.len()
    );
    Ok(format!(
        "0 client errors, delete at +{} after last completion +{}, {}/{} training responses from old color",
        deleted_at - s.start_epoch_seconds,
        last_completion - s.start_epoch_seconds,
        from_old,
        training.len()
    ))
}

fn rainbow_scaling() -> Result<String, String> {
    let s = scenario("rainbow-scaling");
    let out = run(&s, 1, Mode::Level);
    let adaptations: Vec<&TraceRecord> = of_type(&out.records, "adaptation").collect();
    for a in &adaptations {
        ensure!(a.detail["planningWrites"] == 0, "planning wrote at {}", a.t);
    }
    let done: Vec<&TraceRecord> = adaptations
        .iter()
        .copied()
        .filter(|a| a.detail["success"] == true)
        .collect();
    let actions: Vec<&str> = done.iter().filter_map(|a| a.detail["action"].as_str()).collect();
    let initial = s.deployment("webui").map(|d| d.replicas).ok_or("no webui")?;
    let max = 8;
    let adds = (max - initial) as usize;
    let mut want = vec!["addServer"; adds];
    want.push("changeParam");
    ensure!(actions == want, "actions {actions:?}");
    let change = done.last().unwrap();
    ensure!(
        change.detail["effector"] == r#"changeParam("power_mode", "low")"#,
        "effector {}",
        change.detail["effector"]
    );
    let sync = of_type(&out.records, "model_sync")
        .filter(|r| r.t <= change.t)
        .last()
        .ok_or("no model sync")?;
    let group = &sync.detail["serverGroups"]["webuiGroup"];
    ensure!(
        group["replicas"] == max,
        "replicas {} at changeParam",
        group["replicas"]
    );
    ensure!(
        group["usedMemory"].as_f64().unwrap_or(0.0) > 0.8,
        "usedMemory {} at changeParam",
        group["usedMemory"]
    );
    Ok(format!(
        "{adds} x addServer then 1 x changeParam at +{} (usedMemory {:.3}), 0 planning writes",
        change.t - s.start_epoch_seconds,
        group["usedMemory"].as_f64().unwrap()
    ))
}

/// Brute force: among the unconsumed, same-key, in-window earlier events,
/// every subsequence accepted by the leading symbols is a candidate. The
/// matcher takes the latest one, i.e. the greatest index tuple compared from
/// the last position backwards.
struct Oracle {
    pattern: SequencePattern,
    seen: Vec<IndicationEvent>,
    available: Vec<bool>,
}

impl Oracle {
    fn feed(&mut self, ev: &IndicationEvent) -> Option<Vec<IndicationEvent>> {
        let symbols = &self.pattern.symbols;
        let relevant = symbols.iter().any(|s| s.accepts(ev));
        let key = |e: &IndicationEvent| {
            if self.pattern.per_subject {
                e.subject_id.clone()
            } else {
                String::new()
            }
        };
        let mut matched = None;
        if relevant && symbols.last().unwrap().accepts(ev) {
            let pool: Vec<usize> = (0..self.seen.len())
                .filter(|&i| self.available[i])
                .filter(|&i| key(&self.seen[i]) == key(ev))
                .filter(|&i| ev.at_time - self.seen[i].at_time <= self.pattern.within_seconds)
                .collect();
            let need = symbols.len() - 1;
            let mut best: Option<Vec<usize>> = None;
            let mut choose = Vec::new();
            subsets(&pool, need, 0, &mut choose, &mut |c: &[usize]| {
                if c.iter().zip(symbols).all(|(&i, s)| s.accepts(&self.seen[i])) {
                    let later = match &best {
                        None => true,
                        Some(b) => c.iter().rev().cmp(b.iter().rev()) == std::cmp::Ordering::Greater,
                    };
                    if later {
                        best = Some(c.to_vec());
                    }
                }
            });
            if let Some(b) = best {
                let mut events: Vec<IndicationEvent> = b.iter().map(|&i| self.seen[i].clone()).collect();
                for &i in &b {
                    self.available[i] = false;
                }
                events.push(ev.clone());
                matched = Some(events);
            }
        }
        self.seen.push(ev.clone());
        self.available.push(relevant && matched.is_none());
        matched
    }
}

fn subsets(pool: &[usize], k: usize, from: usize, cur: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    if cur.len() == k {
        visit(cur);
        return;
    }
    for j in from..pool.len() {
        if pool.len() - j < k - cur.len() {
            break;
        }
        cur.push(pool[j]);
        subsets(pool, k, j + 1, cur, visit);
        cur.pop();
    }
}

fn random_case(rng: &mut ChaCha8Rng) -> (SequencePattern, Vec<IndicationEvent>) {
    let letters = ["A", "B", "C"];
    let len = rng.gen_range(1..=4);
    let symbols = (0..len)
        .map(|_| {
            let mut s = SymbolSpec::any(letters[rng.gen_range(0..letters.len())]);
            if rng.gen_bool(0.3) {
                s.comparator = Some([Comparator::Gt, Comparator::Le][rng.gen_range(0..2)]);
                s.threshold = Some(rng.gen_range(0..10) as f64);
            }
            s
        })
        .collect();
    let pattern = SequencePattern {
        name: "p".into(),
        symbols,
        per_subject: rng.gen_bool(0.5),
        within_seconds: rng.gen_range(5..=60),
        strategy: None,
    };
    let mut t = 0;
    let events = (0..rng.gen_range(0..=50))
        .map(|_| {
            t += rng.gen_range(0..=8);
            IndicationEvent {
                symbol: letters[rng.gen_range(0..letters.len())].into(),
                subject_id: ["x", "y"][rng.gen_range(0..2)].into(),
                at_time: t,
                value: rng.gen_range(0..10) as f64,
            }
        })
        .collect();
    (pattern, events)
}

fn matcher_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut agree = 0;
    let mut total_matches = 0;
    for case in 0..200 {
        let (pattern, events) = random_case(&mut rng);
        let mut matcher = Matcher::new(pattern.clone());
        let mut oracle = Oracle {
            pattern,
            seen: Vec::new(),
            available: Vec::new(),
        };
        let mut same = true;
        for ev in &events {
            let got = matcher.feed(ev).map(|m| m.events);
            let want = oracle.feed(ev);
            total_matches += want.is_some() as usize;
            if got != want {
                same = false;
                break;
            }
        }
        if same {
            agree += 1;
        } else {
            eprintln!("matcher disagrees with brute force on case {case}");
        }
    }
    ensure!(agree == 200, "{agree}/200 logs agree");
    Ok(format!("200/200 random logs agree ({total_matches} matches)"))
}

fn context_layers() -> Result<String, String> {
    let s = scenario("cop-slow-client");
    let out = run(&s, 1, Mode::Level);
    let rec = &out.records;
    let mut connector: HashMap<String, String> = HashMap::new();
    let mut low_since: Option<usize> = None;
    // per root request: expected variant and the variant each operation ran first
    let mut expected: HashMap<String, &str> = HashMap::new();
    let mut first_run: BTreeMap<(String, String), String> = BTreeMap::new();
    let mut requests = 0;
    let mut slow_low = 0;
    for (i, r) in rec.iter().enumerate() {
        match r.kind.as_str() {
            "connector_property" if r.subject == "conn-slow" && r.detail["value"] == "low" => low_since = Some(i),
            "variant" => {
                let id = r.detail["requestId"].as_str().unwrap_or_default();
                let op = r.detail["operation"].as_str().unwrap_or_default();
                first_run
                    .entry((id.to_string(), op.to_string()))
                    .or_insert_with(|| r.detail["variant"].as_str().unwrap_or_default().to_string());
            }
            "request" => {
                requests += 1;
                let id = r.detail["id"].as_str().unwrap_or_default().to_string();
                let conn = r.detail["connector"].as_str().unwrap_or_default().to_string();
                let low = conn == "conn-slow" && low_since.is_some();
                slow_low += low as usize;
                let want = if low { "lowPower" } else { "base" };
                ensure!(
                    r.detail["variant"] == want,
                    "request {id} on {conn} reported {}",
                    r.detail["variant"]
                );
                expected.insert(id.clone(), want);
                connector.insert(id, conn);
            }
            _ => {}
        }
    }
    ensure!(requests >= 1000, "only {requests} requests");
    ensure!(low_since.is_some(), "slow connector never switched to low power");
    let mut executions = 0;
    for ((id, op), variant) in &first_run {
        let root = id.split('/').next().unwrap();
        let Some(want) = expected.get(root) else { continue };
        executions += 1;
        ensure!(
            variant == want,
            "{id} {op} ran {variant}, wanted {want} ({})",
            connector[root]
        );
    }
    let leaks = first_run
        .iter()
        .filter(|((id, _), v)| {
            *v == "lowPower" && connector.get(id.split('/').next().unwrap()).map(String::as_str) != Some("conn-slow")
        })
        .count();
    ensure!(leaks == 0, "{leaks} lowPower executions outside the slow connector");

    let captured = of_type(rec, "callback")
        .filter(|r| r.detail["captured"] == json!(["lowPower"]))
        .collect::<Vec<_>>();
    ensure!(
        !captured.is_empty(),
        "no callback for a listener captured under lowPower"
    );
    for c in &captured {
        ensure!(
            c.detail["delivery"] == json!([]),
            "delivery context {}",
            c.detail["delivery"]
        );
        ensure!(
            c.detail["variant"] == "lowPower",
            "callback ran {}",
            c.detail["variant"]
        );
    }
    Ok(format!(
        "{requests} requests, {slow_low} slow in lowPower, {executions} executions, 0 leaks, {} captured callbacks in lowPower",
        captured.len()
    ))
}

fn determinism() -> Result<String, String> {
    let mut digests = Vec::new();
    for name in SCENARIOS {
        let s = scenario(name);
        for mode in [Mode::Level, Mode::Event] {
            let runs: Vec<String> = (0..3).map(|_| run(&s, 1, mode).report.trace_digest).collect();
            ensure!(runs.iter().all(|d| *d == runs[0]), "{name} {mode}: digests {runs:?}");
            digests.push(runs[0].clone());
        }
    }
    Ok(format!(
        "{} scenario/mode pairs, 3 identical digests each",
        digests.len()
    ))
}

fn store_conflicts() -> Result<String, String> {
    let mut pairs = 0;
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let mut store = Store::new();
        let names: Vec<String> = (0..rng.gen_range(1..=3)).map(|i| format!("obj-{i}")).collect();
        // the oracle: one map from name to (version, spec)
        let mut oracle: HashMap<String, (u64, Value)> = HashMap::new();
        for n in &names {
            store
                .create(Resource::new(Kind::TeaStoreConfig, n, json!({"v": 0})))
                .map_err(|e| e.to_string())?;
            oracle.insert(n.clone(), (1, json!({"v": 0})));
        }
        for round in 0..rng.gen_range(5..=20) {
            let name = &names[rng.gen_range(0..names.len())];
            let read_a = store
                .get(Kind::TeaStoreConfig, "default", name)
                .map_err(|e| e.to_string())?;
            // writer b sometimes reads after a has written
            let b_late = rng.gen_bool(0.2);
            let mut accepted = 0;
            let mut read_b = read_a.clone();
            for writer in if rng.gen_bool(0.5) { ["a", "b"] } else { ["b", "a"] } {
                if writer == "b" && b_late {
                    read_b = store
                        .get(Kind::TeaStoreConfig, "default", name)
                        .map_err(|e| e.to_string())?;
                }
                let mut r = if writer == "a" { read_a.clone() } else { read_b.clone() };
                let expected = r.version();
                r.spec = json!({"v": round, "by": writer});
                let got = store.update_spec(&r, expected).map_err(|e| e.to_string())?;
                let entry = oracle.get_mut(name).unwrap();
                let want = entry.0 == expected;
                if want {
                    entry.0 += 1;
                    entry.1 = r.spec.clone();
                }
                ensure!(
                    got.accepted == want,
                    "case {case} round {round}: store {got:?}, oracle accepted={want}"
                );
                accepted += got.accepted as u32;
            }
            if !b_late {
                pairs += 1;
                ensure!(
                    accepted == 1,
                    "case {case} round {round}: {accepted} writes accepted from one read"
                );
            }
        }
        for n in &names {
            let r = store
                .get(Kind::TeaStoreConfig, "default", n)
                .map_err(|e| e.to_string())?;
            ensure!(
                (r.version(), r.spec.clone()) == oracle[n],
                "case {case}: {n} diverged from oracle"
            );
        }
    }
    Ok(format!(
        "100 schedules, {pairs} concurrent pairs, one write accepted each, state equals oracle"
    ))
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 10] = [
        ("lowpower trigger window", lowpower_trigger),
        ("lowpower under adapt failures", lowpower_faulty),
        ("reconcile idempotence", idempotence),
        ("controller restart", restart),
        ("blue-green rollout", bluegreen),
        ("rainbow scaling strategy", rainbow_scaling),
        ("sequence matcher vs brute force", matcher_oracle),
        ("context layers", context_layers),
        ("trace determinism", determinism),
        ("store conflict detection", store_conflicts),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
