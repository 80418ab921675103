//! Discrete-event model of a TeaStore-like cluster.
//!
//! Pods have memory and latency dynamics driven by per-profile generators,
//! the built-in deployment controller and autoscaler run level-based on fixed
//! periods, services route client traffic round-robin (with optional mirroring
//! and a static fallback), and every pod exposes an adaptation endpoint with a
//! GET for its current logical state.

mod generator;
mod hpa;
mod types;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use generator::Piecewise;
pub use hpa::desired_replicas;
pub use types::*;

use crate::clock::EpochSeconds;
use crate::layers::{
    capture_listener, client_intercept, propagate, CapturedListener, InterpretationRule, LayerId, LayerSet,
    PropagationMode, RequestContext, ServerInterceptor, VariantRegistry,
};
use crate::request::{Origin, SimRequest, SimResponse};
use crate::rng;
use crate::store::{Kind, Resource, Store, StoreError, DEFAULT_NAMESPACE};
use crate::trace::TraceEvent;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimError {
    #[error("pod {0} not found")]
    PodNotFound(String),
    #[error("pod {0} is not ready")]
    PodNotReady(String),
    #[error("adaptation call to pod {0} failed (injected)")]
    InjectedFailure(String),
    #[error("target {0} not found")]
    TargetNotFound(String),
    #[error("service {0} not found")]
    ServiceNotFound(String),
    #[error("service {0} has no backends")]
    NoBackends(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn default_startup() -> i64 {
    5
}
fn default_speedup() -> f64 {
    2.0
}
fn default_hpa_period() -> i64 {
    15
}
fn default_gain() -> f64 {
    0.001
}
fn default_window() -> usize {
    10
}
fn default_fallback_latency() -> f64 {
    20.0
}
fn default_capacity() -> f64 {
    10.0
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DdosSpec {
    pub rate_threshold: f64,
    pub sustain_seconds: i64,
}

/// Free parameters of the workload model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SimParams {
    #[serde(default = "default_startup")]
    pub pod_startup_seconds: i64,
    #[serde(default = "default_speedup")]
    pub low_power_speedup: f64,
    #[serde(default = "default_hpa_period")]
    pub hpa_period_seconds: i64,
    #[serde(default)]
    pub latency_noise_ms: f64,
    #[serde(default)]
    pub memory_noise_bytes: f64,
    #[serde(default = "default_gain")]
    pub per_request_gain: f64,
    #[serde(default = "default_window")]
    pub response_time_window: usize,
    #[serde(default = "default_fallback_latency")]
    pub fallback_latency_ms: f64,
    #[serde(default)]
    pub ddos: Option<DdosSpec>,
}

impl Default for SimParams {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct WorkloadProfile {
    pub baseline_memory_bytes: u64,
    #[serde(default)]
    pub memory_growth_bytes_per_sec: Piecewise,
    pub latency_ms: Piecewise,
    #[serde(default = "default_capacity")]
    pub capacity_rps: f64,
    /// Container restarts (memory back to baseline) after an OOM.
    #[serde(default = "default_true")]
    pub restart_on_oom: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ClientWorkload {
    pub client: String,
    pub service: String,
    pub rate_per_second: Piecewise,
    #[serde(default)]
    pub connector: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ConnectorSpec {
    pub id: String,
    pub client: String,
    pub service: String,
    pub round_trip_latency_ms: Piecewise,
    #[serde(default)]
    pub properties: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct LayerSpec {
    pub id: LayerId,
    #[serde(default)]
    pub overrides: Vec<String>,
    /// Requests running this layer are processed in low-power mode.
    #[serde(default)]
    pub low_power: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ListenerSpec {
    pub operation: String,
    pub period_seconds: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ServiceLayersSpec {
    pub service: String,
    pub operation: String,
    #[serde(default)]
    pub mode: PropagationMode,
    #[serde(default)]
    pub rules: Vec<InterpretationRule>,
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
    /// Downstream service called once per served request.
    #[serde(default)]
    pub calls: Option<String>,
    #[serde(default)]
    pub listener: Option<ListenerSpec>,
}

#[derive(Debug, Clone)]
struct ServiceLayers {
    spec: ServiceLayersSpec,
    interceptor: ServerInterceptor,
    registry: VariantRegistry,
    low_power: BTreeSet<LayerId>,
    listeners: Vec<CapturedListener>,
    seen_sets: BTreeSet<String>,
}

impl ServiceLayers {
    fn new(spec: ServiceLayersSpec) -> Result<Self, crate::layers::LayerError> {
        let interceptor = ServerInterceptor::new(spec.layers.iter().map(|l| l.id.clone()), spec.rules.clone())?;
        let mut registry = VariantRegistry::new();
        let mut ops: BTreeSet<&str> = BTreeSet::from([spec.operation.as_str()]);
        if let Some(l) = &spec.listener {
            ops.insert(l.operation.as_str());
        }
        for op in ops {
            registry.register_base(op, VariantRegistry::tagging_base(op));
        }
        for layer in &spec.layers {
            for op in &layer.overrides {
                registry.register_layer(op, layer.id.clone(), VariantRegistry::tagging_layer(&layer.id));
            }
        }
        let low_power = spec
            .layers
            .iter()
            .filter(|l| l.low_power)
            .map(|l| l.id.clone())
            .collect();
        Ok(ServiceLayers {
            spec,
            interceptor,
            registry,
            low_power,
            listeners: Vec::new(),
            seen_sets: BTreeSet::new(),
        })
    }
}

/// Runtime view of one pod.
#[derive(Debug, Clone, PartialEq)]
pub struct PodRuntime {
    pub name: String,
    pub deployment: String,
    pub profile: String,
    pub labels: BTreeMap<String, String>,
    pub phase: PodPhase,
    pub ready_at: EpochSeconds,
    pub ip: String,
    pub memory_bytes: f64,
    pub memory_limit_bytes: u64,
    pub baseline_bytes: u64,
    pub above_limit: bool,
    pub power_mode: PowerMode,
    pub flavor: String,
    pub cache_enabled: bool,
    pub in_flight: u32,
    pub latencies: VecDeque<f64>,
    pub training_progress: f64,
    mirrored_this_tick: u64,
    synced: Option<PodStatus>,
}

impl PodRuntime {
    pub fn response_time_ms(&self) -> f64 {
        mean(&self.latencies)
    }

    pub fn used_memory_ratio(&self) -> f64 {
        if self.memory_limit_bytes == 0 {
            0.0
        } else {
            self.memory_bytes / self.memory_limit_bytes as f64
        }
    }

    pub fn adaptation(&self) -> AdaptationState {
        AdaptationState {
            low_power_enabled: self.power_mode == PowerMode::Low,
            active_flavor: self.flavor.clone(),
            cache_enabled: self.cache_enabled,
        }
    }

    fn status(&self) -> PodStatus {
        PodStatus {
            phase: self.phase,
            pod_ip: self.ip.clone(),
            memory_used_bytes: self.memory_bytes.max(0.0) as u64,
            response_time_ms: self.response_time_ms(),
            power_mode: self.power_mode,
            in_flight_requests: self.in_flight,
        }
    }
}

fn mean(xs: &VecDeque<f64>) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn push_window(window: &mut VecDeque<f64>, value: f64, cap: usize) {
    window.push_back(value);
    while window.len() > cap.max(1) {
        window.pop_front();
    }
}

/// Client endpoint of a connector, with mutable customization properties.
#[derive(Debug, Clone, PartialEq)]
pub struct Connector {
    pub spec: ConnectorSpec,
    pub properties: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientStats {
    pub end_to_end_ms: VecDeque<f64>,
    pub requests: u64,
}

impl ClientStats {
    pub fn response_time_ms(&self) -> f64 {
        mean(&self.end_to_end_ms)
    }
}

#[derive(Debug, Clone)]
struct InFlight {
    request_id: String,
    pod: String,
    completes_at: EpochSeconds,
    mirrored: bool,
}

/// Request accounting; every routed client request is served or failed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RequestStats {
    pub routed: u64,
    pub served: u64,
    pub failed_no_backends: u64,
    pub mirrored: u64,
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub store: Store,
    params: SimParams,
    start: EpochSeconds,
    profiles: BTreeMap<String, WorkloadProfile>,
    pods: BTreeMap<String, PodRuntime>,
    pod_counters: BTreeMap<String, u64>,
    ip_counter: u32,
    cursors: BTreeMap<String, usize>,
    mirror_cursors: BTreeMap<String, usize>,
    connectors: BTreeMap<String, Connector>,
    clients: BTreeMap<String, ClientStats>,
    workloads: Vec<(ClientWorkload, f64)>,
    layers: BTreeMap<String, ServiceLayers>,
    inbox: BTreeMap<String, Vec<BroadcastEvent>>,
    in_flight: BTreeMap<u64, InFlight>,
    flight_seq: u64,
    request_seq: u64,
    tick_arrivals: BTreeMap<String, u64>,
    adapt_failure_probability: f64,
    adapt_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    db_healthy: bool,
    ddos_since: Option<EpochSeconds>,
    ddos_raised: bool,
    stats: RequestStats,
    events: Vec<TraceEvent>,
}

impl Cluster {
    pub fn new(params: SimParams, start: EpochSeconds, seed: u64) -> Self {
        Cluster {
            store: Store::new(),
            params,
            start,
            profiles: BTreeMap::new(),
            pods: BTreeMap::new(),
            pod_counters: BTreeMap::new(),
            ip_counter: 0,
            cursors: BTreeMap::new(),
            mirror_cursors: BTreeMap::new(),
            connectors: BTreeMap::new(),
            clients: BTreeMap::new(),
            workloads: Vec::new(),
            layers: BTreeMap::new(),
            inbox: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            flight_seq: 0,
            request_seq: 0,
            tick_arrivals: BTreeMap::new(),
            adapt_failure_probability: 0.0,
            adapt_rng: rng::stream(seed, "adapt"),
            noise_rng: rng::stream(seed, "noise"),
            db_healthy: true,
            ddos_since: None,
            ddos_raised: false,
            stats: RequestStats::default(),
            events: Vec::new(),
        }
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn start(&self) -> EpochSeconds {
        self.start
    }

    pub fn set_adapt_failure_probability(&mut self, p: f64) {
        self.adapt_failure_probability = p.clamp(0.0, 1.0);
    }

    pub fn add_profile(&mut self, name: impl Into<String>, profile: WorkloadProfile) {
        self.profiles.insert(name.into(), profile);
    }

    pub fn add_connector(&mut self, spec: ConnectorSpec) {
        let properties = spec.properties.clone();
        self.connectors.insert(spec.id.clone(), Connector { spec, properties });
    }

    pub fn add_workload(&mut self, workload: ClientWorkload) {
        self.clients.entry(workload.client.clone()).or_default();
        self.workloads.push((workload, 0.0));
    }

    pub fn add_service_layers(&mut self, spec: ServiceLayersSpec) -> Result<(), crate::layers::LayerError> {
        let service = spec.service.clone();
        self.layers.insert(service, ServiceLayers::new(spec)?);
        Ok(())
    }

    pub fn drain_events(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.events)
    }

    fn emit(&mut self, kind: &str, subject: impl Into<String>, detail: Value) {
        self.events.push(TraceEvent::new(kind, subject, detail));
    }

    pub fn stats(&self) -> RequestStats {
        self.stats
    }

    pub fn pod(&self, name: &str) -> Option<&PodRuntime> {
        self.pods.get(name)
    }

    pub fn pods(&self) -> impl Iterator<Item = &PodRuntime> {
        self.pods.values()
    }

    pub fn connector(&self, id: &str) -> Option<&Connector> {
        self.connectors.get(id)
    }

    pub fn connectors(&self) -> impl Iterator<Item = &Connector> {
        self.connectors.values()
    }

    pub fn connector_rtt(&self, id: &str, now: EpochSeconds) -> Option<f64> {
        self.connectors
            .get(id)
            .map(|c| c.spec.round_trip_latency_ms.at((now - self.start) as f64))
    }

    pub fn set_connector_property(&mut self, id: &str, key: &str, value: &str) -> bool {
        match self.connectors.get_mut(id) {
            Some(c) => {
                c.properties.insert(key.to_string(), value.to_string());
                self.emit("connector_property", id, json!({"key": key, "value": value}));
                true
            }
            None => false,
        }
    }

    pub fn client(&self, id: &str) -> Option<&ClientStats> {
        self.clients.get(id)
    }

    pub fn listeners(&self, service: &str) -> &[CapturedListener] {
        self.layers.get(service).map(|l| l.listeners.as_slice()).unwrap_or(&[])
    }

    fn profile_of(&self, pod: &PodRuntime) -> Option<&WorkloadProfile> {
        self.profiles.get(&pod.profile)
    }

    fn scenario_time(&self, now: EpochSeconds) -> f64 {
        (now - self.start) as f64
    }

    // ---------------------------------------------------------------------
    // pods and deployments

    /// Creates a deployment whose initial replicas are already Running.
    pub fn bootstrap_deployment(&mut self, resource: Resource, now: EpochSeconds) -> Result<(), SimError> {
        let spec: DeploymentSpec = resource.spec_as()?;
        let name = resource.name().to_string();
        self.store.create(resource)?;
        for _ in 0..spec.replicas {
            self.create_pod(&name, &spec, now, true)?;
        }
        self.sync_deployment_status(&name)?;
        Ok(())
    }

    fn create_pod(
        &mut self,
        deployment: &str,
        spec: &DeploymentSpec,
        now: EpochSeconds,
        running: bool,
    ) -> Result<String, SimError> {
        let idx = self.pod_counters.entry(deployment.to_string()).or_insert(0);
        let name = format!("{deployment}-{idx}");
        *idx += 1;
        self.ip_counter += 1;
        let ip = format!("10.0.{}.{}", self.ip_counter / 250, self.ip_counter % 250 + 1);
        let profile = spec.template.profile.clone().unwrap_or_else(|| deployment.to_string());
        let baseline = self
            .profiles
            .get(&profile)
            .map(|p| p.baseline_memory_bytes)
            .unwrap_or(0);
        let pod_spec = PodSpec {
            image: spec.template.image.clone(),
            flavor: spec.template.flavor.clone(),
            memory_limit_bytes: spec.template.memory_limit_bytes,
            owner_deployment: deployment.to_string(),
        };
        let runtime = PodRuntime {
            name: name.clone(),
            deployment: deployment.to_string(),
            profile,
            labels: spec.labels.clone(),
            phase: if running { PodPhase::Running } else { PodPhase::Pending },
            ready_at: if running {
                now
            } else {
                now + self.params.pod_startup_seconds
            },
            ip,
            memory_bytes: baseline as f64,
            memory_limit_bytes: spec.template.memory_limit_bytes,
            baseline_bytes: baseline,
            above_limit: false,
            power_mode: PowerMode::High,
            flavor: spec.template.flavor.clone(),
            cache_enabled: false,
            in_flight: 0,
            latencies: VecDeque::new(),
            training_progress: 0.0,
            mirrored_this_tick: 0,
            synced: None,
        };
        let resource = Resource::new(
            Kind::Pod,
            &name,
            serde_json::to_value(&pod_spec).expect("pod spec serializes"),
        )
        .with_labels(spec.labels.clone())
        .with_status(serde_json::to_value(runtime.status()).expect("status serializes"));
        self.store.create(resource)?;
        self.emit(
            "pod_created",
            &name,
            json!({"deployment": deployment, "flavor": runtime.flavor, "phase": runtime.phase}),
        );
        let mut runtime = runtime;
        runtime.synced = Some(runtime.status());
        self.pods.insert(name.clone(), runtime);
        Ok(name)
    }

    fn sync_deployment_status(&mut self, name: &str) -> Result<(), SimError> {
        let Ok(dep) = self.store.get(Kind::Deployment, DEFAULT_NAMESPACE, name) else {
            return Ok(());
        };
        let ready = self
            .pods
            .values()
            .filter(|p| p.deployment == name && p.phase == PodPhase::Running)
            .count() as u32;
        let status: DeploymentStatus = dep.status_as()?;
        if status.ready_replicas != ready || dep.status.get("readyReplicas").is_none() {
            let mut next = dep.clone();
            next.status = json!(DeploymentStatus { ready_replicas: ready });
            self.store.update_status(&next, dep.version())?;
        }
        Ok(())
    }

    /// Built-in deployment controller: one level-based pass.
    fn reconcile_deployments(&mut self, now: EpochSeconds) -> Result<(), SimError> {
        let deployments = self.store.list(Kind::Deployment, DEFAULT_NAMESPACE, &BTreeMap::new());
        let live: BTreeSet<String> = deployments.iter().map(|d| d.name().to_string()).collect();
        for dep in &deployments {
            let spec: DeploymentSpec = dep.spec_as()?;
            let name = dep.name().to_string();
            let owned: Vec<String> = self
                .pods
                .values()
                .filter(|p| p.deployment == name && p.phase != PodPhase::Terminating)
                .map(|p| p.name.clone())
                .collect();
            let want = spec.replicas as usize;
            if owned.len() < want {
                for _ in owned.len()..want {
                    self.create_pod(&name, &spec, now, false)?;
                }
            } else if owned.len() > want {
                let mut by_age = owned.clone();
                by_age.sort_by_key(|n| pod_index(n));
                for pod in by_age.into_iter().skip(want) {
                    self.set_phase(&pod, PodPhase::Terminating);
                }
            }
        }
        let orphans: Vec<String> = self
            .pods
            .values()
            .filter(|p| !live.contains(&p.deployment) && p.phase != PodPhase::Terminating)
            .map(|p| p.name.clone())
            .collect();
        for pod in orphans {
            self.set_phase(&pod, PodPhase::Terminating);
        }
        let drained: Vec<String> = self
            .pods
            .values()
            .filter(|p| p.phase == PodPhase::Terminating && p.in_flight == 0)
            .map(|p| p.name.clone())
            .collect();
        for pod in drained {
            self.pods.remove(&pod);
            self.store.delete(Kind::Pod, DEFAULT_NAMESPACE, &pod)?;
            self.emit("pod_deleted", &pod, json!({}));
        }
        for name in live {
            self.sync_deployment_status(&name)?;
        }
        Ok(())
    }

    fn set_phase(&mut self, pod: &str, phase: PodPhase) {
        if let Some(p) = self.pods.get_mut(pod) {
            if p.phase != phase {
                p.phase = phase;
                self.emit("pod_phase", pod, json!({"phase": phase}));
            }
        }
    }

    // ---------------------------------------------------------------------
    // one simulated second

    /// Advances the workload model by one second at `now` and returns the
    /// broadcast events raised during it.
    pub fn step(&mut self, now: EpochSeconds) -> Result<Vec<BroadcastEvent>, SimError> {
        let mut raised = Vec::new();
        self.complete_requests(now);

        let ready: Vec<String> = self
            .pods
            .values()
            .filter(|p| p.phase == PodPhase::Pending && p.ready_at <= now)
            .map(|p| p.name.clone())
            .collect();
        for pod in ready {
            self.set_phase(&pod, PodPhase::Running);
        }

        self.reconcile_deployments(now)?;
        raised.extend(self.grow_memory(now));
        let arrivals = self.arrive(now);
        raised.extend(self.detect_ddos(now, arrivals));
        self.fire_listeners(now);
        self.advance_training();
        self.sync_pod_statuses()?;

        for ev in &raised {
            self.record_broadcast(ev.clone());
        }
        Ok(raised)
    }

    fn complete_requests(&mut self, now: EpochSeconds) {
        let done: Vec<u64> = self
            .in_flight
            .iter()
            .filter(|(_, f)| f.completes_at <= now)
            .map(|(id, _)| *id)
            .collect();
        for id in done {
            let f = self.in_flight.remove(&id).expect("listed");
            if let Some(p) = self.pods.get_mut(&f.pod) {
                p.in_flight = p.in_flight.saturating_sub(1);
            }
            self.emit(
                "request_done",
                &f.pod,
                json!({"id": f.request_id, "mirrored": f.mirrored}),
            );
        }
    }

    fn grow_memory(&mut self, now: EpochSeconds) -> Vec<BroadcastEvent> {
        let t = self.scenario_time(now);
        let mut out = Vec::new();
        let names: Vec<String> = self
            .pods
            .values()
            .filter(|p| p.phase == PodPhase::Running)
            .map(|p| p.name.clone())
            .collect();
        for name in names {
            let pod = &self.pods[&name];
            let Some(profile) = self.profile_of(pod) else { continue };
            let mut rate = profile.memory_growth_bytes_per_sec.at(t);
            let restart = profile.restart_on_oom;
            if pod.power_mode == PowerMode::Low {
                rate *= 0.5;
            }
            let noise = if self.params.memory_noise_bytes > 0.0 {
                self.noise_rng
                    .gen_range(-self.params.memory_noise_bytes..=self.params.memory_noise_bytes)
            } else {
                0.0
            };
            let pod = self.pods.get_mut(&name).expect("listed");
            pod.memory_bytes = (pod.memory_bytes + rate + noise).max(0.0);
            let over = pod.memory_bytes > pod.memory_limit_bytes as f64;
            if over && !pod.above_limit {
                pod.above_limit = true;
                out.push(BroadcastEvent {
                    event_type: BroadcastType::OutOfMemory,
                    source_pod: name.clone(),
                    at_epoch_seconds: now,
                    payload: BTreeMap::from([("deployment".to_string(), pod.deployment.clone())]),
                });
                if restart {
                    pod.memory_bytes = pod.baseline_bytes as f64;
                    pod.above_limit = false;
                }
            } else if !over {
                pod.above_limit = false;
            }
        }
        out
    }

    fn arrive(&mut self, now: EpochSeconds) -> u64 {
        let t = self.scenario_time(now);
        self.tick_arrivals.clear();
        let mut total = 0;
        for i in 0..self.workloads.len() {
            let (w, acc) = &mut self.workloads[i];
            *acc += w.rate_per_second.at(t).max(0.0);
            let n = acc.floor();
            *acc -= n;
            let w = w.clone();
            for _ in 0..n as u64 {
                total += 1;
                self.request_seq += 1;
                let mut req = SimRequest::new(format!("r{}", self.request_seq), &w.client);
                if let Some(c) = &w.connector {
                    req = req.via(c);
                    if let Some(conn) = self.connectors.get(c) {
                        req = client_intercept(&conn.properties, &req);
                    }
                }
                // failures are accounted inside route_request
                let _ = self.route_request(&w.service, &req, now);
            }
        }
        total
    }

    fn detect_ddos(&mut self, now: EpochSeconds, arrivals: u64) -> Option<BroadcastEvent> {
        let spec = self.params.ddos.clone()?;
        if arrivals as f64 > spec.rate_threshold {
            let since = *self.ddos_since.get_or_insert(now);
            if !self.ddos_raised && now - since + 1 >= spec.sustain_seconds {
                self.ddos_raised = true;
                return Some(BroadcastEvent {
                    event_type: BroadcastType::DDoSAttack,
                    source_pod: String::new(),
                    at_epoch_seconds: now,
                    payload: BTreeMap::from([("ratePerSecond".to_string(), arrivals.to_string())]),
                });
            }
        } else {
            self.ddos_since = None;
            self.ddos_raised = false;
        }
        None
    }

    fn advance_training(&mut self) {
        let gain = self.params.per_request_gain;
        for pod in self.pods.values_mut() {
            if pod.mirrored_this_tick > 0 {
                pod.training_progress = (pod.training_progress + pod.mirrored_this_tick as f64 * gain).min(1.0);
                pod.mirrored_this_tick = 0;
            }
        }
    }

    fn sync_pod_statuses(&mut self) -> Result<(), SimError> {
        let names: Vec<String> = self.pods.keys().cloned().collect();
        for name in names {
            let status = self.pods[&name].status();
            if self.pods[&name].synced.as_ref() == Some(&status) {
                continue;
            }
            let current = self.store.get(Kind::Pod, DEFAULT_NAMESPACE, &name)?;
            let mut next = current.clone();
            next.status = serde_json::to_value(&status).expect("status serializes");
            self.store.update_status(&next, current.version())?;
            self.pods.get_mut(&name).expect("listed").synced = Some(status);
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // broadcasts

    fn record_broadcast(&mut self, ev: BroadcastEvent) {
        self.emit(
            "broadcast",
            if ev.source_pod.is_empty() {
                "cluster"
            } else {
                ev.source_pod.as_str()
            }
            .to_string(),
            json!(ev),
        );
        let target = match ev.event_type {
            BroadcastType::OutOfMemory => self
                .pods
                .get(&ev.source_pod)
                .map(|p| p.deployment.clone())
                .or_else(|| ev.payload.get("deployment").cloned())
                .unwrap_or_default(),
            _ => String::new(),
        };
        self.inbox.entry(target).or_default().push(ev);
    }

    /// Injects a scripted broadcast. OutOfMemory events are attributed to the
    /// owner deployment of `source_pod` (or `payload.deployment`).
    pub fn inject_broadcast(&mut self, mut ev: BroadcastEvent, now: EpochSeconds) -> BroadcastEvent {
        ev.at_epoch_seconds = now;
        if ev.event_type == BroadcastType::OutOfMemory {
            if let Some(p) = self.pods.get(&ev.source_pod) {
                ev.payload
                    .entry("deployment".to_string())
                    .or_insert_with(|| p.deployment.clone());
            }
        } else {
            ev.source_pod.clear();
        }
        self.record_broadcast(ev.clone());
        ev
    }

    /// Consumes queued broadcasts addressed to `deployment` ("" for
    /// cluster-scoped events).
    pub fn take_broadcasts(&mut self, deployment: &str) -> Vec<BroadcastEvent> {
        self.inbox.remove(deployment).unwrap_or_default()
    }

    pub fn pending_broadcasts(&self, deployment: &str) -> usize {
        self.inbox.get(deployment).map_or(0, Vec::len)
    }

    /// Puts events back at the front of the queue (e.g. after a failed write).
    pub fn requeue_broadcasts(&mut self, deployment: &str, events: Vec<BroadcastEvent>) {
        if events.is_empty() {
            return;
        }
        let queue = self.inbox.entry(deployment.to_string()).or_default();
        let rest = std::mem::take(queue);
        queue.extend(events);
        queue.extend(rest);
    }

    /// Scripted database health flag; flipping to unhealthy raises
    /// DatabaseUnavailable.
    pub fn set_database_health(&mut self, healthy: bool, now: EpochSeconds) -> Option<BroadcastEvent> {
        let was = self.db_healthy;
        self.db_healthy = healthy;
        if was && !healthy {
            let ev = BroadcastEvent {
                event_type: BroadcastType::DatabaseUnavailable,
                source_pod: String::new(),
                at_epoch_seconds: now,
                payload: BTreeMap::new(),
            };
            self.record_broadcast(ev.clone());
            Some(ev)
        } else {
            None
        }
    }

    // ---------------------------------------------------------------------
    // autoscaler

    /// Evaluates one autoscaler and writes the desired replica count to the
    /// target deployment when it differs.
    pub fn hpa_evaluate(&mut self, hpa_name: &str) -> Result<u32, SimError> {
        let hpa = self
            .store
            .get(Kind::HorizontalPodAutoscaler, DEFAULT_NAMESPACE, hpa_name)?;
        let spec: HpaSpec = hpa.spec_as()?;
        let dep = self
            .store
            .get(Kind::Deployment, DEFAULT_NAMESPACE, &spec.target_deployment)
            .map_err(|_| SimError::TargetNotFound(spec.target_deployment.clone()))?;
        let mut dep_spec: DeploymentSpec = dep.spec_as()?;
        let current = dep_spec.replicas;
        let capacity = self
            .profiles
            .get(dep_spec.template.profile.as_deref().unwrap_or(&spec.target_deployment))
            .map_or(default_capacity(), |p| p.capacity_rps);
        let arrivals = self.tick_arrivals.get(&spec.target_deployment).copied().unwrap_or(0) as f64;
        let utilization = if current == 0 {
            0.0
        } else {
            arrivals / (current as f64 * capacity)
        };
        let desired = desired_replicas(
            current,
            utilization,
            spec.target_utilization_ratio,
            spec.min_replicas,
            spec.max_replicas,
        );
        self.apply_hpa(&hpa, dep, &mut dep_spec, current, desired, utilization)?;
        Ok(desired)
    }

    /// Same as [`hpa_evaluate`](Self::hpa_evaluate) with an externally
    /// observed utilization ratio.
    pub fn hpa_evaluate_with(&mut self, hpa_name: &str, utilization: f64) -> Result<u32, SimError> {
        let hpa = self
            .store
            .get(Kind::HorizontalPodAutoscaler, DEFAULT_NAMESPACE, hpa_name)?;
        let spec: HpaSpec = hpa.spec_as()?;
        let dep = self
            .store
            .get(Kind::Deployment, DEFAULT_NAMESPACE, &spec.target_deployment)
            .map_err(|_| SimError::TargetNotFound(spec.target_deployment.clone()))?;
        let mut dep_spec: DeploymentSpec = dep.spec_as()?;
        let current = dep_spec.replicas;
        let desired = desired_replicas(
            current,
            utilization,
            spec.target_utilization_ratio,
            spec.min_replicas,
            spec.max_replicas,
        );
        self.apply_hpa(&hpa, dep, &mut dep_spec, current, desired, utilization)?;
        Ok(desired)
    }

    fn apply_hpa(
        &mut self,
        hpa: &Resource,
        dep: Resource,
        dep_spec: &mut DeploymentSpec,
        current: u32,
        desired: u32,
        utilization: f64,
    ) -> Result<(), SimError> {
        if desired != current {
            dep_spec.replicas = desired;
            let mut next = dep.clone();
            next.spec = serde_json::to_value(&*dep_spec).expect("spec serializes");
            self.store.update_spec(&next, dep.version())?.committed(&dep.key())?;
            self.emit(
                "hpa_scaled",
                hpa.name(),
                json!({"deployment": dep.name(), "from": current, "to": desired, "utilization": utilization}),
            );
        }
        let status = HpaStatus {
            current_replicas: desired,
            current_utilization_ratio: utilization,
        };
        let old: HpaStatus = hpa.status_as()?;
        if old != status || hpa.status.get("currentReplicas").is_none() {
            let mut next = hpa.clone();
            next.status = serde_json::to_value(&status).expect("status serializes");
            self.store.update_status(&next, hpa.version())?;
        }
        Ok(())
    }

    pub fn hpa_round(&mut self) -> Vec<SimError> {
        let names: Vec<String> = self
            .store
            .keys(Kind::HorizontalPodAutoscaler)
            .into_iter()
            .map(|k| k.name)
            .collect();
        names.into_iter().filter_map(|n| self.hpa_evaluate(&n).err()).collect()
    }

    // ---------------------------------------------------------------------
    // adaptation endpoint

    fn running_pod(&self, name: &str) -> Result<&PodRuntime, SimError> {
        let pod = self
            .pods
            .get(name)
            .ok_or_else(|| SimError::PodNotFound(name.to_string()))?;
        if pod.phase != PodPhase::Running {
            return Err(SimError::PodNotReady(name.to_string()));
        }
        Ok(pod)
    }

    /// GET of the pod's logical adaptation state; read-only.
    pub fn query_adaptation(&self, pod: &str) -> Result<AdaptationState, SimError> {
        self.running_pod(pod).map(PodRuntime::adaptation)
    }

    /// POST to the pod's adaptation endpoint. Injected failures leave the
    /// state unchanged.
    pub fn adapt_pod(&mut self, pod: &str, action: &AdaptAction) -> Result<(), SimError> {
        self.running_pod(pod)?;
        let p = self.adapt_failure_probability;
        if p > 0.0 && self.adapt_rng.gen_bool(p) {
            self.emit("adapt_failed", pod, json!({"action": action}));
            return Err(SimError::InjectedFailure(pod.to_string()));
        }
        let runtime = self.pods.get_mut(pod).expect("checked");
        match action {
            AdaptAction::SetPowerMode(mode) => runtime.power_mode = *mode,
            AdaptAction::SetFlavor(f) => runtime.flavor = f.clone(),
        }
        let state = runtime.adaptation();
        self.emit("adapted", pod, json!({"action": action, "state": state}));
        Ok(())
    }

    pub fn training_progress(&self, pod: &str) -> Option<f64> {
        self.pods.get(pod).map(|p| p.training_progress)
    }

    // ---------------------------------------------------------------------
    // routing

    fn running_matching(&self, selector: &BTreeMap<String, String>) -> Vec<String> {
        self.pods
            .values()
            .filter(|p| p.phase == PodPhase::Running && selector.iter().all(|(k, v)| p.labels.get(k) == Some(v)))
            .map(|p| p.name.clone())
            .collect()
    }

    fn sample_latency(&mut self, pod: &str, now: EpochSeconds, low_power_request: bool) -> f64 {
        let t = self.scenario_time(now);
        let runtime = &self.pods[pod];
        let base = self.profile_of(runtime).map_or(0.0, |p| p.latency_ms.at(t));
        let low = runtime.power_mode == PowerMode::Low || low_power_request;
        let mut latency = if low {
            base / self.params.low_power_speedup
        } else {
            base
        };
        if self.params.latency_noise_ms > 0.0 {
            let n = self.params.latency_noise_ms;
            latency += self.noise_rng.gen_range(-n..=n);
        }
        latency.max(1.0)
    }

    /// Routes one client request through `service`.
    pub fn route_request(
        &mut self,
        service: &str,
        request: &SimRequest,
        now: EpochSeconds,
    ) -> Result<SimResponse, SimError> {
        self.stats.routed += 1;
        let svc = self
            .store
            .get(Kind::Service, DEFAULT_NAMESPACE, service)
            .map_err(|_| SimError::ServiceNotFound(service.to_string()));
        let svc = match svc {
            Ok(s) => s,
            Err(e) => {
                self.stats.failed_no_backends += 1;
                self.emit(
                    "request",
                    service,
                    json!({"id": request.id, "client": request.client, "outcome": "no-backends"}),
                );
                return Err(e);
            }
        };
        let spec: ServiceSpec = svc.spec_as()?;
        let candidates = self.running_matching(&spec.selector);
        let use_fallback = spec.fallback.is_some() && (spec.fallback_active || candidates.is_empty());

        if let Some(mirror) = &spec.mirror_selector {
            self.mirror(service, mirror, request, now);
        }

        let response = if use_fallback {
            let fallback = spec.fallback.clone().expect("checked");
            SimResponse {
                request_id: request.id.clone(),
                origin: Origin::Fallback { service: fallback },
                latency_ms: self.params.fallback_latency_ms,
                completes_at: now + 1,
                variant: None,
            }
        } else if candidates.is_empty() {
            self.stats.failed_no_backends += 1;
            self.emit(
                "request",
                service,
                json!({"id": request.id, "client": request.client, "outcome": "no-backends"}),
            );
            return Err(SimError::NoBackends(service.to_string()));
        } else {
            let cursor = self.cursors.entry(service.to_string()).or_insert(0);
            let pod = candidates[*cursor % candidates.len()].clone();
            *cursor += 1;
            let (variant, low_request, downstream_ms) = self.run_layers(service, request, now);
            let latency = self.sample_latency(&pod, now, low_request);
            let runtime = self.pods.get_mut(&pod).expect("candidate");
            push_window(&mut runtime.latencies, latency, self.params.response_time_window);
            runtime.in_flight += 1;
            let deployment = runtime.deployment.clone();
            *self.tick_arrivals.entry(deployment.clone()).or_default() += 1;
            let completes_at = now + ((latency / 1000.0).ceil() as i64).max(1);
            self.flight_seq += 1;
            self.in_flight.insert(
                self.flight_seq,
                InFlight {
                    request_id: request.id.clone(),
                    pod: pod.clone(),
                    completes_at,
                    mirrored: false,
                },
            );
            SimResponse {
                request_id: request.id.clone(),
                origin: Origin::Pod { pod, deployment },
                latency_ms: latency + downstream_ms,
                completes_at,
                variant,
            }
        };

        self.stats.served += 1;
        let rtt = request
            .origin_connector
            .as_deref()
            .and_then(|c| self.connector_rtt(c, now))
            .unwrap_or(0.0);
        let window = self.params.response_time_window;
        let client = self.clients.entry(request.client.clone()).or_default();
        client.requests += 1;
        push_window(&mut client.end_to_end_ms, response.latency_ms + rtt, window);
        self.emit(
            "request",
            service,
            json!({
                "id": response.request_id,
                "client": request.client,
                "connector": request.origin_connector,
                "outcome": "served",
                "origin": response.origin,
                "latencyMs": response.latency_ms,
                "completesAt": response.completes_at,
                "variant": response.variant,
            }),
        );
        Ok(response)
    }

    fn mirror(&mut self, service: &str, selector: &BTreeMap<String, String>, request: &SimRequest, now: EpochSeconds) {
        let shadows = self.running_matching(selector);
        if shadows.is_empty() {
            return;
        }
        let cursor = self.mirror_cursors.entry(service.to_string()).or_insert(0);
        let pod = shadows[*cursor % shadows.len()].clone();
        *cursor += 1;
        let latency = self.sample_latency(&pod, now, false);
        let runtime = self.pods.get_mut(&pod).expect("shadow");
        runtime.in_flight += 1;
        runtime.mirrored_this_tick += 1;
        self.stats.mirrored += 1;
        self.flight_seq += 1;
        self.in_flight.insert(
            self.flight_seq,
            InFlight {
                request_id: request.id.clone(),
                pod: pod.clone(),
                completes_at: now + ((latency / 1000.0).ceil() as i64).max(1),
                mirrored: true,
            },
        );
        self.emit("mirror", &pod, json!({"id": request.id, "service": service}));
    }

    /// Runs the service's layer-aware dispatch (and its downstream hop).
    /// Returns the effective variant, whether a low-power layer ran, and the
    /// downstream latency.
    fn run_layers(&mut self, service: &str, request: &SimRequest, now: EpochSeconds) -> (Option<String>, bool, f64) {
        let Some(layers) = self.layers.get(service) else {
            return (None, false, 0.0);
        };
        let (ctx, warnings) = layers.interceptor.intercept(request);
        let mut audit = Vec::new();
        let out = layers
            .registry
            .dispatch(&ctx, &layers.spec.operation, &json!({"service": service}), &mut audit)
            .ok();
        let low = ctx.active_layers.iter().any(|l| layers.low_power.contains(l));
        let variant = out.and_then(|v| v["variant"].as_str().map(str::to_string));
        let calls = layers.spec.calls.clone();
        let mode = layers.spec.mode;
        for w in warnings {
            self.emit("warning", service, json!({"message": w}));
        }
        for e in audit {
            self.emit("variant", service, json!(e));
        }
        self.register_listener(service, &ctx);

        let mut downstream_ms = 0.0;
        if let Some(target) = calls {
            let child = propagate(&ctx, &request.child(&target), mode);
            downstream_ms = self.serve_downstream(&target, &child, now);
        }
        (variant, low, downstream_ms)
    }

    fn serve_downstream(&mut self, service: &str, request: &SimRequest, now: EpochSeconds) -> f64 {
        let Ok(svc) = self.store.get(Kind::Service, DEFAULT_NAMESPACE, service) else {
            return 0.0;
        };
        let Ok(spec) = svc.spec_as::<ServiceSpec>() else {
            return 0.0;
        };
        let candidates = self.running_matching(&spec.selector);
        if candidates.is_empty() {
            return 0.0;
        }
        let cursor = self.cursors.entry(service.to_string()).or_insert(0);
        let pod = candidates[*cursor % candidates.len()].clone();
        *cursor += 1;
        let deployment = self.pods[&pod].deployment.clone();
        *self.tick_arrivals.entry(deployment).or_default() += 1;
        let (_, low, _) = self.run_layers(service, request, now);
        self.sample_latency(&pod, now, low)
    }

    fn register_listener(&mut self, service: &str, ctx: &RequestContext) {
        let Some(layers) = self.layers.get_mut(service) else {
            return;
        };
        if layers.spec.listener.is_none() {
            return;
        }
        let signature = ctx.active_layers.to_header();
        if !layers.seen_sets.insert(signature) {
            return;
        }
        let id = format!("{service}/listener-{}", layers.listeners.len());
        let listener = capture_listener(id.clone(), ctx);
        layers.listeners.push(listener.clone());
        self.emit(
            "listener_registered",
            service,
            json!({"listener": id, "captured": listener.captured_layers, "request": ctx.request_id}),
        );
    }

    fn fire_listeners(&mut self, now: EpochSeconds) {
        let elapsed = now - self.start;
        let mut fired = Vec::new();
        for (service, layers) in &self.layers {
            let Some(spec) = &layers.spec.listener else { continue };
            if spec.period_seconds <= 0 || elapsed <= 0 || elapsed % spec.period_seconds != 0 {
                continue;
            }
            // delivered from a base (empty) context
            let delivery = LayerSet::new();
            for listener in &layers.listeners {
                let mut audit = Vec::new();
                let out = layers
                    .registry
                    .dispatch_callback(listener, &spec.operation, &json!({"delivery": delivery}), &mut audit)
                    .ok();
                let variant = out.and_then(|v| v["variant"].as_str().map(str::to_string));
                fired.push((service.clone(), listener.clone(), variant, audit));
            }
        }
        for (service, listener, variant, audit) in fired {
            self.emit(
                "callback",
                &service,
                json!({
                    "listener": listener.listener_id,
                    "captured": listener.captured_layers,
                    "delivery": LayerSet::new(),
                    "variant": variant,
                    "executions": audit,
                }),
            );
        }
    }
}

fn pod_index(name: &str) -> u64 {
    name.rsplit('-').next().and_then(|s| s.parse().ok()).unwrap_or(0)
}
