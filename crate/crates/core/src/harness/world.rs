use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value};

use super::report::RunReport;
use super::scenario::{Goal, Scenario, ScriptAction};
use super::{HarnessError, RunOutput};
use crate::clock::{EpochSeconds, SimClock};
use crate::engine::{Engine, EngineTask, Mode};
use crate::operators::{BlueGreenOperator, LowPowerOperator, RecommenderModelStatus, RolloutPhase};
use crate::rainbow::Mape;
use crate::rng;
use crate::sim::{BroadcastEvent, Cluster, DeploymentSpec, HpaSpec, PodPhase, PowerMode, ServiceSpec};
use crate::store::{Kind, ObjectKey, Resource, DEFAULT_NAMESPACE};
use crate::trace::{Trace, TraceEvent, TraceRecord};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RunOptions {
    pub seed: u64,
    pub mode: Mode,
    /// Horizon relative to the scenario start; the scenario's duration when absent.
    pub until_seconds: Option<i64>,
    /// Subset of the configured controllers; all of them when absent.
    pub controllers: Option<Vec<String>>,
}

impl RunOptions {
    pub fn new(seed: u64, mode: Mode) -> Self {
        RunOptions {
            seed,
            mode,
            until_seconds: None,
            controllers: None,
        }
    }

    pub fn until(mut self, seconds: i64) -> Self {
        self.until_seconds = Some(seconds);
        self
    }

    pub fn controllers<S: Into<String>>(mut self, names: impl IntoIterator<Item = S>) -> Self {
        self.controllers = Some(names.into_iter().map(Into::into).collect());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Task {
    Step,
    Hpa,
    ModelSync,
    Scripted(usize),
    Script(usize),
    Restart(usize),
    Engine(EngineTask),
}

impl From<EngineTask> for Task {
    fn from(task: EngineTask) -> Self {
        Task::Engine(task)
    }
}

/// Second-pass write counts for every controller and key at one instant.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct IdempotenceProbe {
    pub at: EpochSeconds,
    pub controller: String,
    pub key: String,
    pub first_writes: u64,
    pub second_writes: u64,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    scenario: Scenario,
    options: RunOptions,
    cluster: Cluster,
    engine: Engine,
    mape: Option<Mape>,
    clock: SimClock<Task>,
    trace: Trace,
    controllers: BTreeMap<String, usize>,
    goal_met: Option<bool>,
    end: EpochSeconds,
    finished: bool,
}

fn setup(what: impl Into<String>, e: impl ToString) -> HarnessError {
    HarnessError::Setup {
        what: what.into(),
        message: e.to_string(),
    }
}

impl Simulation {
    pub fn new(scenario: Scenario, options: RunOptions) -> Result<Self, HarnessError> {
        let configured = scenario.controllers.configured();
        let enabled: Vec<String> = match &options.controllers {
            Some(list) => {
                for name in list {
                    if !configured.contains(&name.as_str()) {
                        return Err(HarnessError::UnknownController(name.clone(), configured.join(", ")));
                    }
                }
                list.clone()
            }
            None => configured.iter().map(|s| s.to_string()).collect(),
        };
        let start = scenario.start_epoch_seconds;
        let end = start + options.until_seconds.unwrap_or(scenario.duration_seconds);
        let seed = options.seed;

        let mut cluster = Cluster::new(scenario.params.clone(), start, seed);
        for (name, profile) in &scenario.profiles {
            cluster.add_profile(name.clone(), profile.clone());
        }
        for c in &scenario.connectors {
            cluster.add_connector(c.clone());
        }
        for w in &scenario.workloads {
            cluster.add_workload(w.clone());
        }
        for l in &scenario.context_layers {
            cluster
                .add_service_layers(l.clone())
                .map_err(|e| setup(format!("context layers of {}", l.service), e))?;
        }
        let faults = &scenario.faults;
        cluster.set_adapt_failure_probability(faults.adapt_call_failure_probability);
        cluster
            .store
            .set_watch_drop(faults.watch_drop_probability, rng::stream_seed(seed, "watch"));

        let mut engine = Engine::new(scenario.engine.clone(), seed);
        engine.set_delivery_drop(faults.watch_drop_probability);
        let mut controllers = BTreeMap::new();
        let ctl = &scenario.controllers;
        if let Some(cfg) = ctl.lowpower.clone().filter(|_| enabled.iter().any(|n| n == "lowpower")) {
            let idx = engine.register(Box::new(LowPowerOperator::new(cfg)), options.mode, &mut cluster.store);
            controllers.insert("lowpower".to_string(), idx);
        }
        if let Some(cfg) = ctl
            .bluegreen
            .clone()
            .filter(|_| enabled.iter().any(|n| n == "bluegreen"))
        {
            let idx = engine.register(Box::new(BlueGreenOperator::new(cfg)), options.mode, &mut cluster.store);
            controllers.insert("bluegreen".to_string(), idx);
        }
        let mape = ctl
            .rainbow
            .clone()
            .filter(|_| enabled.iter().any(|n| n == "rainbow"))
            .map(Mape::new);

        for d in &scenario.deployments {
            let spec = DeploymentSpec {
                replicas: d.replicas,
                template: d.template.clone(),
                labels: d.labels.clone(),
            };
            let res = Resource::new(
                Kind::Deployment,
                &d.name,
                serde_json::to_value(&spec).expect("spec serializes"),
            )
            .with_labels(d.labels.clone());
            cluster
                .bootstrap_deployment(res, start)
                .map_err(|e| setup(format!("deployment {}", d.name), e))?;
        }
        for h in &scenario.hpas {
            let spec = HpaSpec {
                target_deployment: h.target_deployment.clone(),
                min_replicas: h.min_replicas,
                max_replicas: h.max_replicas,
                target_utilization_ratio: h.target_utilization_ratio,
            };
            let res = Resource::new(
                Kind::HorizontalPodAutoscaler,
                &h.name,
                serde_json::to_value(&spec).expect("spec serializes"),
            );
            cluster
                .store
                .create(res)
                .map_err(|e| setup(format!("autoscaler {}", h.name), e))?;
        }
        for s in &scenario.services {
            let spec = ServiceSpec {
                selector: s.selector.clone(),
                mirror_selector: s.mirror_selector.clone(),
                fallback: s.fallback.clone(),
                fallback_active: s.fallback_active,
            };
            let res = Resource::new(
                Kind::Service,
                &s.name,
                serde_json::to_value(&spec).expect("spec serializes"),
            );
            cluster
                .store
                .create(res)
                .map_err(|e| setup(format!("service {}", s.name), e))?;
        }
        for r in &scenario.resources {
            let mut res = Resource::new(r.kind, &r.name, r.spec.clone()).with_labels(r.labels.clone());
            if !r.status.is_null() {
                res = res.with_status(r.status.clone());
            }
            cluster
                .store
                .create(res)
                .map_err(|e| setup(format!("{} {}", r.kind, r.name), e))?;
        }

        let mut clock = SimClock::new(start);
        for &idx in controllers.values() {
            engine.start(idx, &cluster.store, &mut clock);
        }
        clock.schedule(start + 1, Task::Step);
        if !scenario.hpas.is_empty() {
            clock.schedule(start + 1, Task::Hpa);
        }
        if let Some(m) = &mape {
            clock.schedule(start + m.sync_period(), Task::ModelSync);
        }
        for (i, ev) in faults.scripted_events.iter().enumerate() {
            if let Some(at) = ev.when().resolve(start) {
                clock.schedule(at, Task::Scripted(i));
            }
        }
        for (i, step) in scenario.script.iter().enumerate() {
            if let Some(at) = step.when().resolve(start) {
                clock.schedule(at, Task::Script(i));
            }
        }
        for (i, r) in faults.controller_restarts.iter().enumerate() {
            if let Some(at) = r.when().resolve(start) {
                if controllers.contains_key(&r.controller) {
                    clock.schedule(at, Task::Restart(i));
                }
            }
        }

        let mut trace = Trace::new();
        trace.push(
            start,
            TraceEvent::new(
                "run_start",
                scenario.name.clone(),
                json!({
                    "seed": seed,
                    "mode": options.mode,
                    "start": start,
                    "end": end,
                    "controllers": enabled,
                }),
            ),
        );
        let mut sim = Simulation {
            scenario,
            options,
            cluster,
            engine,
            mape,
            clock,
            trace,
            controllers,
            goal_met: None,
            end,
            finished: false,
        };
        sim.settle(start);
        Ok(sim)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn options(&self) -> &RunOptions {
        &self.options
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn mape(&self) -> Option<&Mape> {
        self.mape.as_ref()
    }

    pub fn now(&self) -> EpochSeconds {
        self.clock.now()
    }

    pub fn end(&self) -> EpochSeconds {
        self.end
    }

    pub fn records(&self) -> &[TraceRecord] {
        self.trace.records()
    }

    pub fn goal_met(&self) -> bool {
        self.goal_met.unwrap_or(false)
    }

    /// Processes every task due at or before `until` (capped at the horizon).
    pub fn run_until(&mut self, until: EpochSeconds) {
        let until = until.min(self.end);
        while let Some((t, task)) = self.clock.pop_until(until) {
            self.handle(t, task);
            self.settle(t);
        }
        self.clock.advance_to(until);
    }

    pub fn run(&mut self) {
        self.run_until(self.end);
        if !self.finished {
            self.finished = true;
            let stats = self.cluster.stats();
            self.trace.push(
                self.end,
                TraceEvent::new(
                    "run_end",
                    self.scenario.name.clone(),
                    json!({"goalMet": self.goal_met(), "requests": stats}),
                ),
            );
        }
    }

    pub fn report(&self) -> RunReport {
        RunReport::from_records(self.trace.records())
    }

    pub fn finish(mut self) -> RunOutput {
        self.run();
        let report = self.report();
        let final_state = self.final_state();
        RunOutput {
            records: self.trace.into_records(),
            report,
            final_state,
        }
    }

    fn handle(&mut self, t: EpochSeconds, task: Task) {
        match task {
            Task::Step => {
                match self.cluster.step(t) {
                    Ok(raised) => {
                        for ev in raised {
                            self.engine.notify_broadcast(&ev, &self.cluster, &mut self.clock);
                        }
                    }
                    Err(e) => self.note_error("step", e),
                }
                self.clock.schedule(t + 1, Task::Step);
            }
            Task::Hpa => {
                for e in self.cluster.hpa_round() {
                    self.note_error("autoscaler", e);
                }
                let period = self.cluster.params().hpa_period_seconds.max(1);
                self.clock.schedule(t + period, Task::Hpa);
            }
            Task::ModelSync => {
                if let Some(m) = self.mape.as_mut() {
                    m.tick(&mut self.cluster, t);
                    let period = m.sync_period().max(1);
                    self.clock.schedule(t + period, Task::ModelSync);
                }
            }
            Task::Scripted(i) => {
                let s = &self.scenario.faults.scripted_events[i];
                let ev = BroadcastEvent {
                    event_type: s.event_type,
                    source_pod: s.source_pod.clone(),
                    at_epoch_seconds: t,
                    payload: s.payload.clone(),
                };
                let ev = self.cluster.inject_broadcast(ev, t);
                self.engine.notify_broadcast(&ev, &self.cluster, &mut self.clock);
            }
            Task::Script(i) => match self.scenario.script[i].action.clone() {
                ScriptAction::PatchSpec { kind, name, patch } => {
                    if let Err(e) = self.patch_spec(kind, &name, &patch) {
                        self.note_error("script", e);
                    }
                }
                ScriptAction::SetDatabaseHealth { healthy } => {
                    if let Some(ev) = self.cluster.set_database_health(healthy, t) {
                        self.engine.notify_broadcast(&ev, &self.cluster, &mut self.clock);
                    }
                }
            },
            Task::Restart(i) => {
                let name = &self.scenario.faults.controller_restarts[i].controller;
                if let Some(&idx) = self.controllers.get(name) {
                    self.engine.restart(idx, &mut self.cluster.store, &mut self.clock);
                }
            }
            Task::Engine(task) => self.engine.handle(task, &mut self.cluster, &mut self.clock),
        }
    }

    fn patch_spec(&mut self, kind: Kind, name: &str, patch: &Value) -> Result<(), String> {
        let current = self
            .cluster
            .store
            .get(kind, DEFAULT_NAMESPACE, name)
            .map_err(|e| e.to_string())?;
        let mut next = current.clone();
        json_patch::merge(&mut next.spec, patch);
        self.cluster
            .store
            .update_spec(&next, current.version())
            .and_then(|o| o.committed(&current.key()))
            .map(|_| ())
            .map_err(|e| e.to_string())
    }

    fn note_error(&mut self, source: &str, e: impl ToString) {
        log::warn!("{source}: {}", e.to_string());
        self.trace.push(
            self.clock.now(),
            TraceEvent::new("error", source, json!({"message": e.to_string()})),
        );
    }

    /// Delivers watch notifications, then records everything emitted at `t`.
    fn settle(&mut self, t: EpochSeconds) {
        self.engine.pump(&mut self.cluster.store, &mut self.clock);
        self.trace.extend(t, self.engine.drain_events());
        if let Some(m) = self.mape.as_mut() {
            self.trace.extend(t, m.drain_events());
        }
        self.trace.extend(t, self.cluster.drain_events());
        for w in self.cluster.store.drain_journal() {
            // pod statuses change every second and are traced as pod events instead
            if w.key.kind == Kind::Pod {
                continue;
            }
            self.trace.push(
                t,
                TraceEvent::new(
                    "write",
                    w.key.to_string(),
                    json!({"write": w.write, "resourceVersion": w.resource_version, "generation": w.generation}),
                ),
            );
        }
        if self.scenario.goal.is_some() {
            let met = self.evaluate_goal();
            if self.goal_met != Some(met) {
                self.goal_met = Some(met);
                self.trace.push(
                    t,
                    TraceEvent::new("goal", self.scenario.name.clone(), json!({"met": met})),
                );
            }
        }
    }

    pub fn evaluate_goal(&self) -> bool {
        let Some(goal) = &self.scenario.goal else { return false };
        match goal {
            Goal::AllPodsLowPower { deployment } => {
                let mut running = self
                    .cluster
                    .pods()
                    .filter(|p| &p.deployment == deployment && p.phase == PodPhase::Running)
                    .peekable();
                running.peek().is_some() && running.all(|p| p.power_mode == PowerMode::Low)
            }
            Goal::RolloutComplete { resource, flavor } => self
                .cluster
                .store
                .get(Kind::RecommenderModel, DEFAULT_NAMESPACE, resource)
                .ok()
                .and_then(|r| r.status_as::<RecommenderModelStatus>().ok())
                .is_some_and(|s| s.phase == RolloutPhase::Stable && &s.active_flavor == flavor),
            Goal::ConnectorProperty { connector, key, value } => self
                .cluster
                .connector(connector)
                .is_some_and(|c| c.properties.get(key) == Some(value)),
            Goal::SpecEquals {
                kind,
                name,
                pointer,
                value,
            } => self
                .cluster
                .store
                .get(*kind, DEFAULT_NAMESPACE, name)
                .ok()
                .and_then(|r| r.spec.pointer(pointer).cloned())
                .is_some_and(|v| &v == value),
        }
    }

    /// Observable end state, free of bookkeeping such as resource versions:
    /// object specs and statuses, pod adaptation states and connector
    /// properties.
    pub fn final_state(&self) -> Value {
        let mut objects = BTreeMap::new();
        for r in self.cluster.store.objects() {
            if r.kind == Kind::Pod {
                continue;
            }
            objects.insert(r.key().to_string(), json!({"spec": r.spec, "status": r.status}));
        }
        let pods: BTreeMap<_, _> = self
            .cluster
            .pods()
            .map(|p| (p.name.clone(), json!({"phase": p.phase, "adaptation": p.adaptation()})))
            .collect();
        let connectors: BTreeMap<_, _> = self
            .cluster
            .connectors()
            .map(|c| (c.spec.id.clone(), c.properties.clone()))
            .collect();
        json!({"objects": objects, "pods": pods, "connectors": connectors})
    }

    /// For every controller and every object it watches, reconciles twice
    /// on a copy of the current state and reports the write counts. The
    /// running simulation is left untouched.
    pub fn idempotence_probe(&self) -> Vec<IdempotenceProbe> {
        let mut out = Vec::new();
        let now = self.clock.now();
        for (name, &idx) in &self.controllers {
            let mut cluster = self.cluster.clone();
            let mut engine = self.engine.clone();
            let keys: Vec<ObjectKey> = engine
                .watched_kinds(idx)
                .into_iter()
                .flat_map(|k| cluster.store.keys(k))
                .collect();
            for key in keys {
                let (_, first) = engine.run_direct(idx, &key, &mut cluster, now);
                let (_, second) = engine.run_direct(idx, &key, &mut cluster, now);
                out.push(IdempotenceProbe {
                    at: now,
                    controller: name.clone(),
                    key: key.to_string(),
                    first_writes: first,
                    second_writes: second,
                });
            }
        }
        out
    }

    /// Store writes the harness itself observed, by kind of write.
    pub fn write_counts(&self) -> BTreeMap<String, u64> {
        let mut counts = BTreeMap::new();
        for r in self.trace.records().iter().filter(|r| r.kind == "write") {
            if let Some(w) = r.detail.get("write").and_then(Value::as_str) {
                *counts.entry(w.to_string()).or_default() += 1;
            }
        }
        counts
    }
}
