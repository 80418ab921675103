//! Controller runtime.
//!
//! Level mode: a key is reconciled on any delivered notification, when its
//! requeue timer expires, or when its error backoff expires; reconciles of the
//! same key never overlap and duplicate requests collapse. Event mode reacts
//! to delivered notifications only, with no periodic resync and no retry.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::clock::{EpochSeconds, SimClock};
use crate::rng;
use crate::sim::{BroadcastEvent, Cluster};
use crate::store::{Kind, ObjectKey, Store, WatchId};
use crate::trace::TraceEvent;

/// Identifies the one resource a reconcile is about.
pub type ReconcileRequest = ObjectKey;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReconcileResult {
    /// 0 disables periodic requeue.
    pub requeue_after_seconds: u64,
    pub error: Option<String>,
}

impl ReconcileResult {
    pub fn requeue_after(seconds: u64) -> Self {
        ReconcileResult {
            requeue_after_seconds: seconds,
            error: None,
        }
    }

    pub fn done() -> Self {
        ReconcileResult::default()
    }

    pub fn failed(error: impl fmt::Display) -> Self {
        ReconcileResult {
            requeue_after_seconds: 0,
            error: Some(error.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Level,
    Event,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "level" => Ok(Mode::Level),
            "event" => Ok(Mode::Event),
            other => Err(format!("unknown mode {other:?} (expected level|event)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Level => "level",
            Mode::Event => "event",
        })
    }
}

/// What a reconcile function gets to work with.
pub struct ReconcileContext<'a> {
    pub cluster: &'a mut Cluster,
    pub now: EpochSeconds,
    notes: Map<String, Value>,
}

impl<'a> ReconcileContext<'a> {
    pub fn new(cluster: &'a mut Cluster, now: EpochSeconds) -> Self {
        ReconcileContext {
            cluster,
            now,
            notes: Map::new(),
        }
    }

    /// Attaches a field to this reconcile's trace record.
    pub fn note(&mut self, key: &str, value: impl Into<Value>) {
        self.notes.insert(key.to_string(), value.into());
    }

    pub fn notes(&self) -> &Map<String, Value> {
        &self.notes
    }
}

/// A reconcile function plus the kinds it watches.
///
/// `reconcile` must depend only on store and cluster state, the request key
/// and the clock. Anything that must survive a restart belongs in resource
/// status.
pub trait Reconciler: Send {
    fn name(&self) -> &str;
    fn watched_kinds(&self) -> Vec<Kind>;

    /// Requests to enqueue when a broadcast event is delivered.
    fn broadcast_targets(&self, _event: &BroadcastEvent, _cluster: &Cluster) -> Vec<ReconcileRequest> {
        Vec::new()
    }

    fn reconcile(&mut self, request: &ReconcileRequest, ctx: &mut ReconcileContext<'_>) -> ReconcileResult;

    fn box_clone(&self) -> Box<dyn Reconciler>;
}

impl Clone for Box<dyn Reconciler> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineTask {
    Process {
        controller: usize,
    },
    Done {
        controller: usize,
        incarnation: u64,
        key: ReconcileRequest,
        result: ReconcileResult,
    },
    Wake {
        controller: usize,
        incarnation: u64,
        key: ReconcileRequest,
        at: EpochSeconds,
    },
}

pub trait Scheduler {
    fn now(&self) -> EpochSeconds;
    fn schedule(&mut self, at: EpochSeconds, task: EngineTask);
}

impl<T: From<EngineTask>> Scheduler for SimClock<T> {
    fn now(&self) -> EpochSeconds {
        SimClock::now(self)
    }

    fn schedule(&mut self, at: EpochSeconds, task: EngineTask) {
        SimClock::schedule(self, at, T::from(task));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    /// Logical duration of one reconcile; the key stays in flight meanwhile.
    #[serde(default)]
    pub reconcile_seconds: i64,
    #[serde(default = "default_backoff_initial")]
    pub backoff_initial_seconds: i64,
    #[serde(default = "default_backoff_cap")]
    pub backoff_cap_seconds: i64,
}

fn default_parallel() -> usize {
    4
}
fn default_backoff_initial() -> i64 {
    1
}
fn default_backoff_cap() -> i64 {
    60
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_parallel: default_parallel(),
            reconcile_seconds: 0,
            backoff_initial_seconds: default_backoff_initial(),
            backoff_cap_seconds: default_backoff_cap(),
        }
    }
}

impl EngineConfig {
    /// Delay before retry number `failures` (1-based): initial, doubling, capped.
    pub fn backoff(&self, failures: u32) -> i64 {
        let shift = failures.saturating_sub(1).min(32);
        self.backoff_initial_seconds
            .saturating_mul(1i64 << shift)
            .min(self.backoff_cap_seconds)
    }
}

#[derive(Clone)]
struct Slot {
    reconciler: Box<dyn Reconciler>,
    mode: Mode,
    watches: Vec<WatchId>,
    incarnation: u64,
    queue: VecDeque<ReconcileRequest>,
    queued: BTreeSet<ReconcileRequest>,
    in_flight: BTreeSet<ReconcileRequest>,
    dirty: BTreeSet<ReconcileRequest>,
    failures: BTreeMap<ReconcileRequest, u32>,
    wake: BTreeMap<ReconcileRequest, EpochSeconds>,
    runs: u64,
}

#[derive(Clone)]
pub struct Engine {
    config: EngineConfig,
    slots: Vec<Slot>,
    delivery_drop: f64,
    delivery_rng: ChaCha8Rng,
    events: Vec<TraceEvent>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine").field("controllers", &self.names()).finish()
    }
}

impl Engine {
    pub fn new(config: EngineConfig, seed: u64) -> Self {
        Engine {
            config,
            slots: Vec::new(),
            delivery_drop: 0.0,
            delivery_rng: rng::stream(seed, "delivery"),
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Drop probability for broadcast and resync deliveries (store watches
    /// are made lossy on the store itself).
    pub fn set_delivery_drop(&mut self, p: f64) {
        self.delivery_drop = p.clamp(0.0, 1.0);
    }

    pub fn drain_events(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn names(&self) -> Vec<String> {
        self.slots.iter().map(|s| s.reconciler.name().to_string()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.reconciler.name() == name)
    }

    pub fn mode(&self, controller: usize) -> Mode {
        self.slots[controller].mode
    }

    pub fn runs(&self, controller: usize) -> u64 {
        self.slots[controller].runs
    }

    pub fn watched_kinds(&self, controller: usize) -> Vec<Kind> {
        self.slots[controller].reconciler.watched_kinds()
    }

    pub fn is_in_flight(&self, controller: usize, key: &ReconcileRequest) -> bool {
        self.slots[controller].in_flight.contains(key)
    }

    pub fn pending(&self, controller: usize) -> Vec<ReconcileRequest> {
        self.slots[controller].queue.iter().cloned().collect()
    }

    /// Registers a controller and subscribes to its watched kinds.
    pub fn register(&mut self, reconciler: Box<dyn Reconciler>, mode: Mode, store: &mut Store) -> usize {
        let watches = reconciler
            .watched_kinds()
            .into_iter()
            .map(|k| store.watch(Some(k)))
            .collect();
        self.slots.push(Slot {
            reconciler,
            mode,
            watches,
            incarnation: 0,
            queue: VecDeque::new(),
            queued: BTreeSet::new(),
            in_flight: BTreeSet::new(),
            dirty: BTreeSet::new(),
            failures: BTreeMap::new(),
            wake: BTreeMap::new(),
            runs: 0,
        });
        self.slots.len() - 1
    }

    /// Initial resync: one request per existing object of each watched kind.
    /// Level mode always enqueues; event mode only sees what the lossy
    /// delivery channel lets through.
    pub fn start(&mut self, controller: usize, store: &Store, sched: &mut dyn Scheduler) {
        let kinds = self.slots[controller].reconciler.watched_kinds();
        let keys: Vec<ReconcileRequest> = kinds.into_iter().flat_map(|k| store.keys(k)).collect();
        for key in keys {
            if self.slots[controller].mode == Mode::Level || self.delivered() {
                self.enqueue(controller, key, sched);
            }
        }
    }

    fn delivered(&mut self) -> bool {
        if self.delivery_drop >= 1.0 {
            false
        } else if self.delivery_drop <= 0.0 {
            true
        } else {
            !self.delivery_rng.gen_bool(self.delivery_drop)
        }
    }

    /// Makes `key` pending. Already-pending keys are left alone; keys being
    /// reconciled get exactly one follow-up run.
    pub fn enqueue(&mut self, controller: usize, key: ReconcileRequest, sched: &mut dyn Scheduler) {
        let slot = &mut self.slots[controller];
        if slot.in_flight.contains(&key) {
            slot.dirty.insert(key);
            return;
        }
        if slot.queued.insert(key.clone()) {
            slot.queue.push_back(key);
            sched.schedule(sched.now(), EngineTask::Process { controller });
        }
    }

    /// Moves delivered watch notifications into the work queues.
    pub fn pump(&mut self, store: &mut Store, sched: &mut dyn Scheduler) {
        for controller in 0..self.slots.len() {
            let watches = self.slots[controller].watches.clone();
            for w in watches {
                for n in store.poll(w) {
                    let key = ObjectKey {
                        kind: n.kind,
                        namespace: n.namespace,
                        name: n.name,
                    };
                    // deletions leave nothing to reconcile against
                    if n.event_type == crate::store::EventType::Deleted {
                        continue;
                    }
                    self.enqueue(controller, key, sched);
                }
            }
        }
    }

    /// Delivers a broadcast to every controller that maps it to requests.
    pub fn notify_broadcast(&mut self, event: &BroadcastEvent, cluster: &Cluster, sched: &mut dyn Scheduler) {
        for controller in 0..self.slots.len() {
            let targets = self.slots[controller].reconciler.broadcast_targets(event, cluster);
            for key in targets {
                if self.delivered() {
                    self.enqueue(controller, key, sched);
                } else {
                    self.events.push(TraceEvent::new(
                        "delivery_dropped",
                        self.slots[controller].reconciler.name().to_string(),
                        json!({"key": key.to_string(), "event": event.event_type}),
                    ));
                }
            }
        }
    }

    pub fn handle(&mut self, task: EngineTask, cluster: &mut Cluster, sched: &mut dyn Scheduler) {
        match task {
            EngineTask::Process { controller } => self.process(controller, cluster, sched),
            EngineTask::Done {
                controller,
                incarnation,
                key,
                result,
            } => self.complete(controller, incarnation, key, result, sched),
            EngineTask::Wake {
                controller,
                incarnation,
                key,
                at,
            } => {
                let slot = &mut self.slots[controller];
                if slot.incarnation == incarnation && slot.wake.get(&key) == Some(&at) {
                    slot.wake.remove(&key);
                    self.enqueue(controller, key, sched);
                }
            }
        }
    }

    fn process(&mut self, controller: usize, cluster: &mut Cluster, sched: &mut dyn Scheduler) {
        let max = self.config.max_parallel.max(1);
        loop {
            let slot = &mut self.slots[controller];
            if slot.in_flight.len() >= max {
                return;
            }
            let Some(key) = slot.queue.pop_front() else { return };
            slot.queued.remove(&key);
            slot.in_flight.insert(key.clone());
            slot.runs += 1;
            let incarnation = slot.incarnation;
            let now = sched.now();
            let (result, writes, notes) = run_once(slot.reconciler.as_mut(), &key, cluster, now);
            let mut detail = json!({
                "key": key.to_string(),
                "mode": slot.mode,
                "run": slot.runs,
                "writes": writes,
                "requeueAfter": result.requeue_after_seconds,
                "error": result.error,
            });
            if let Some(obj) = detail.as_object_mut() {
                obj.extend(notes);
            }
            self.events
                .push(TraceEvent::new("reconcile", slot.reconciler.name().to_string(), detail));
            sched.schedule(
                now + self.config.reconcile_seconds.max(0),
                EngineTask::Done {
                    controller,
                    incarnation,
                    key,
                    result,
                },
            );
        }
    }

    fn complete(
        &mut self,
        controller: usize,
        incarnation: u64,
        key: ReconcileRequest,
        result: ReconcileResult,
        sched: &mut dyn Scheduler,
    ) {
        if self.slots[controller].incarnation != incarnation {
            return;
        }
        let now = sched.now();
        let slot = &mut self.slots[controller];
        slot.in_flight.remove(&key);
        let name = slot.reconciler.name().to_string();
        match (slot.mode, &result.error) {
            (Mode::Level, Some(err)) => {
                let failures = slot.failures.entry(key.clone()).or_insert(0);
                *failures += 1;
                let delay = self.config.backoff(*failures);
                let at = now + delay;
                slot.wake.insert(key.clone(), at);
                sched.schedule(
                    at,
                    EngineTask::Wake {
                        controller,
                        incarnation,
                        key: key.clone(),
                        at,
                    },
                );
                self.events.push(TraceEvent::new(
                    "backoff",
                    name,
                    json!({"key": key.to_string(), "delay": delay, "failures": failures, "error": err}),
                ));
            }
            (Mode::Level, None) => {
                slot.failures.remove(&key);
                if result.requeue_after_seconds > 0 {
                    let at = now + result.requeue_after_seconds as i64;
                    slot.wake.insert(key.clone(), at);
                    sched.schedule(
                        at,
                        EngineTask::Wake {
                            controller,
                            incarnation,
                            key: key.clone(),
                            at,
                        },
                    );
                } else {
                    slot.wake.remove(&key);
                }
            }
            (Mode::Event, Some(err)) => {
                self.events.push(TraceEvent::new(
                    "reconcile_dropped",
                    name,
                    json!({"key": key.to_string(), "error": err}),
                ));
            }
            (Mode::Event, None) => {}
        }
        let slot = &mut self.slots[controller];
        if slot.dirty.remove(&key) {
            self.enqueue(controller, key, sched);
        }
        sched.schedule(now, EngineTask::Process { controller });
    }

    /// Crash and restart: every queue, timer, backoff counter and in-flight
    /// marker is discarded, watches are re-registered and an initial resync
    /// is performed.
    pub fn restart(&mut self, controller: usize, store: &mut Store, sched: &mut dyn Scheduler) {
        let slot = &mut self.slots[controller];
        for w in slot.watches.drain(..) {
            store.unwatch(w);
        }
        slot.incarnation += 1;
        slot.queue.clear();
        slot.queued.clear();
        slot.in_flight.clear();
        slot.dirty.clear();
        slot.failures.clear();
        slot.wake.clear();
        slot.watches = slot
            .reconciler
            .watched_kinds()
            .into_iter()
            .map(|k| store.watch(Some(k)))
            .collect();
        let name = slot.reconciler.name().to_string();
        self.events.push(TraceEvent::new(
            "controller_restart",
            name,
            json!({"incarnation": self.slots[controller].incarnation}),
        ));
        self.start(controller, store, sched);
    }

    /// Runs one reconcile immediately, outside the queue, returning the
    /// result and the number of store writes it made.
    pub fn run_direct(
        &mut self,
        controller: usize,
        key: &ReconcileRequest,
        cluster: &mut Cluster,
        now: EpochSeconds,
    ) -> (ReconcileResult, u64) {
        let (result, writes, _) = run_once(self.slots[controller].reconciler.as_mut(), key, cluster, now);
        (result, writes)
    }
}

fn run_once(
    reconciler: &mut dyn Reconciler,
    key: &ReconcileRequest,
    cluster: &mut Cluster,
    now: EpochSeconds,
) -> (ReconcileResult, u64, Map<String, Value>) {
    let before = cluster.store.write_count();
    let mut ctx = ReconcileContext::new(cluster, now);
    let result = reconciler.reconcile(key, &mut ctx);
    let notes = std::mem::take(&mut ctx.notes);
    let writes = cluster.store.write_count() - before;
    (result, writes, notes)
}
