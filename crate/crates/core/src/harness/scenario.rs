//! Scenario files: cluster layout, workloads, controllers, faults, script
//! and the goal a run is judged against.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ScenarioError;
use crate::clock::EpochSeconds;
use crate::engine::EngineConfig;
use crate::operators::{BlueGreenConfig, LowPowerConfig, RecommenderModelSpec, TeaStoreConfigSpec};
use crate::rainbow::RuleFile;
use crate::sim::{
    BroadcastType, ClientWorkload, ConnectorSpec, PodTemplate, ServiceLayersSpec, SimParams, WorkloadProfile,
};
use crate::store::Kind;

/// First logical second of every run unless a scenario says otherwise.
pub const DEFAULT_START: EpochSeconds = 1_763_744_203;

pub const CONTROLLER_NAMES: &[&str] = &["lowpower", "bluegreen", "rainbow"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_start")]
    pub start_epoch_seconds: EpochSeconds,
    #[serde(default = "default_duration")]
    pub duration_seconds: i64,
    #[serde(default)]
    pub params: SimParams,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub profiles: BTreeMap<String, WorkloadProfile>,
    #[serde(default)]
    pub deployments: Vec<DeploymentDecl>,
    #[serde(default)]
    pub hpas: Vec<HpaDecl>,
    #[serde(default)]
    pub services: Vec<ServiceDecl>,
    #[serde(default)]
    pub connectors: Vec<ConnectorSpec>,
    #[serde(default)]
    pub workloads: Vec<ClientWorkload>,
    #[serde(default)]
    pub context_layers: Vec<ServiceLayersSpec>,
    #[serde(default)]
    pub resources: Vec<ResourceDecl>,
    #[serde(default)]
    pub controllers: ControllersDecl,
    #[serde(default)]
    pub faults: FaultSpec,
    #[serde(default)]
    pub script: Vec<ScriptStep>,
    #[serde(default)]
    pub goal: Option<Goal>,
}

fn default_start() -> EpochSeconds {
    DEFAULT_START
}
fn default_duration() -> i64 {
    600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DeploymentDecl {
    pub name: String,
    pub replicas: u32,
    pub template: PodTemplate,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct HpaDecl {
    pub name: String,
    pub target_deployment: String,
    pub min_replicas: u32,
    pub max_replicas: u32,
    pub target_utilization_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ServiceDecl {
    pub name: String,
    pub selector: BTreeMap<String, String>,
    #[serde(default)]
    pub mirror_selector: Option<BTreeMap<String, String>>,
    #[serde(default)]
    pub fallback: Option<String>,
    #[serde(default)]
    pub fallback_active: bool,
}

/// A custom resource created at start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ResourceDecl {
    pub kind: Kind,
    pub name: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    pub spec: Value,
    #[serde(default)]
    pub status: Value,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ControllersDecl {
    #[serde(default)]
    pub lowpower: Option<LowPowerConfig>,
    #[serde(default)]
    pub bluegreen: Option<BlueGreenConfig>,
    #[serde(default)]
    pub rainbow: Option<RuleFile>,
}

impl ControllersDecl {
    pub fn configured(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.lowpower.is_some() {
            out.push("lowpower");
        }
        if self.bluegreen.is_some() {
            out.push("bluegreen");
        }
        if self.rainbow.is_some() {
            out.push("rainbow");
        }
        out
    }
}

/// A point in logical time, absolute or relative to the scenario start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct When {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_epoch_seconds: Option<EpochSeconds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_offset_seconds: Option<i64>,
}

impl When {
    pub fn offset(seconds: i64) -> Self {
        When {
            at_epoch_seconds: None,
            at_offset_seconds: Some(seconds),
        }
    }

    pub fn resolve(&self, start: EpochSeconds) -> Option<EpochSeconds> {
        match (self.at_epoch_seconds, self.at_offset_seconds) {
            (Some(t), None) => Some(t),
            (None, Some(o)) => Some(start + o),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RestartDecl {
    pub controller: String,
    #[serde(default)]
    pub at_epoch_seconds: Option<EpochSeconds>,
    #[serde(default)]
    pub at_offset_seconds: Option<i64>,
}

impl RestartDecl {
    pub fn when(&self) -> When {
        When {
            at_epoch_seconds: self.at_epoch_seconds,
            at_offset_seconds: self.at_offset_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScriptedEvent {
    pub event_type: BroadcastType,
    #[serde(default)]
    pub source_pod: String,
    #[serde(default)]
    pub payload: BTreeMap<String, String>,
    #[serde(default)]
    pub at_epoch_seconds: Option<EpochSeconds>,
    #[serde(default)]
    pub at_offset_seconds: Option<i64>,
}

impl ScriptedEvent {
    pub fn when(&self) -> When {
        When {
            at_epoch_seconds: self.at_epoch_seconds,
            at_offset_seconds: self.at_offset_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FaultSpec {
    /// Applies to store watches, broadcast deliveries and resync deliveries.
    #[serde(default)]
    pub watch_drop_probability: f64,
    #[serde(default)]
    pub adapt_call_failure_probability: f64,
    #[serde(default)]
    pub controller_restarts: Vec<RestartDecl>,
    #[serde(default)]
    pub scripted_events: Vec<ScriptedEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase", deny_unknown_fields)]
pub enum ScriptAction {
    /// JSON merge patch applied to a resource's spec.
    PatchSpec {
        kind: Kind,
        name: String,
        patch: Value,
    },
    SetDatabaseHealth {
        healthy: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScriptStep {
    #[serde(default)]
    pub at_epoch_seconds: Option<EpochSeconds>,
    #[serde(default)]
    pub at_offset_seconds: Option<i64>,
    pub action: ScriptAction,
}

impl ScriptStep {
    pub fn when(&self) -> When {
        When {
            at_epoch_seconds: self.at_epoch_seconds,
            at_offset_seconds: self.at_offset_seconds,
        }
    }
}

/// Desired end state; a run has converged when it holds at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase", deny_unknown_fields)]
pub enum Goal {
    /// Every running pod of the deployment reports low power.
    AllPodsLowPower { deployment: String },
    /// The rollout is Stable on the given flavor.
    RolloutComplete { resource: String, flavor: String },
    ConnectorProperty {
        connector: String,
        key: String,
        value: String,
    },
    /// A JSON pointer into a resource's spec equals `value`.
    SpecEquals {
        kind: Kind,
        name: String,
        pointer: String,
        value: Value,
    },
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            origin: path.display().to_string(),
            message: e.to_string(),
        })?;
        Scenario::parse(&text, &path.display().to_string())
    }

    /// Parses and validates. Schema errors carry the JSON path and the
    /// line/column in `origin`.
    pub fn parse(text: &str, origin: &str) -> Result<Scenario, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            ScenarioError::Parse {
                origin: origin.to_string(),
                line: inner.line(),
                column: inner.column(),
                path,
                message: strip_location(&inner.to_string()),
            }
        })?;
        let errors = scenario.check();
        if errors.is_empty() {
            Ok(scenario)
        } else {
            Err(ScenarioError::Invalid {
                origin: origin.to_string(),
                errors,
            })
        }
    }

    pub fn end(&self) -> EpochSeconds {
        self.start_epoch_seconds + self.duration_seconds
    }

    pub fn deployment(&self, name: &str) -> Option<&DeploymentDecl> {
        self.deployments.iter().find(|d| d.name == name)
    }

    fn resource(&self, kind: Kind, name: &str) -> bool {
        self.resources.iter().any(|r| r.kind == kind && r.name == name)
            || match kind {
                Kind::Deployment => self.deployment(name).is_some(),
                Kind::Service => self.services.iter().any(|s| s.name == name),
                Kind::HorizontalPodAutoscaler => self.hpas.iter().any(|h| h.name == name),
                _ => false,
            }
    }

    /// Referential and range checks; one message per problem, each naming
    /// the offending field.
    pub fn check(&self) -> Vec<String> {
        let mut e = Vec::new();
        let deployments: BTreeSet<&str> = self.deployments.iter().map(|d| d.name.as_str()).collect();
        let services: BTreeSet<&str> = self.services.iter().map(|s| s.name.as_str()).collect();
        let connectors: BTreeSet<&str> = self.connectors.iter().map(|c| c.id.as_str()).collect();
        let hpas: BTreeSet<&str> = self.hpas.iter().map(|h| h.name.as_str()).collect();
        let clients: BTreeSet<&str> = self.workloads.iter().map(|w| w.client.as_str()).collect();

        if self.duration_seconds <= 0 {
            e.push("durationSeconds: must be positive".into());
        }
        if self.engine.max_parallel == 0 {
            e.push("engine.maxParallel: must be at least 1".into());
        }
        for (i, d) in self.deployments.iter().enumerate() {
            let profile = d.template.profile.as_deref().unwrap_or(&d.name);
            if !self.profiles.contains_key(profile) {
                e.push(format!(
                    "deployments[{i}].template.profile: unknown profile {profile:?}"
                ));
            }
        }
        if deployments.len() != self.deployments.len() {
            e.push("deployments: duplicate names".into());
        }
        for (i, h) in self.hpas.iter().enumerate() {
            if !deployments.contains(h.target_deployment.as_str()) {
                e.push(format!(
                    "hpas[{i}].targetDeployment: unknown deployment {:?}",
                    h.target_deployment
                ));
            }
            if h.min_replicas > h.max_replicas {
                e.push(format!("hpas[{i}]: minReplicas exceeds maxReplicas"));
            }
            if !(h.target_utilization_ratio > 0.0 && h.target_utilization_ratio <= 1.0) {
                e.push(format!("hpas[{i}].targetUtilizationRatio: must be in (0, 1]"));
            }
        }
        for (i, c) in self.connectors.iter().enumerate() {
            if !services.contains(c.service.as_str()) {
                e.push(format!("connectors[{i}].service: unknown service {:?}", c.service));
            }
        }
        for (i, w) in self.workloads.iter().enumerate() {
            if !services.contains(w.service.as_str()) {
                e.push(format!("workloads[{i}].service: unknown service {:?}", w.service));
            }
            if let Some(c) = &w.connector {
                if !connectors.contains(c.as_str()) {
                    e.push(format!("workloads[{i}].connector: unknown connector {c:?}"));
                }
            }
        }
        for (i, l) in self.context_layers.iter().enumerate() {
            if !services.contains(l.service.as_str()) {
                e.push(format!("contextLayers[{i}].service: unknown service {:?}", l.service));
            }
            if let Some(c) = &l.calls {
                if !services.contains(c.as_str()) {
                    e.push(format!("contextLayers[{i}].calls: unknown service {c:?}"));
                }
            }
        }
        for (i, r) in self.resources.iter().enumerate() {
            let decoded = match r.kind {
                Kind::TeaStoreConfig => serde_json::from_value::<TeaStoreConfigSpec>(r.spec.clone()).err(),
                Kind::RecommenderModel => serde_json::from_value::<RecommenderModelSpec>(r.spec.clone()).err(),
                other => {
                    e.push(format!("resources[{i}].kind: {other} is declared in its own section"));
                    None
                }
            };
            if let Some(err) = decoded {
                e.push(format!("resources[{i}].spec: {err}"));
            }
        }

        if let Some(lp) = &self.controllers.lowpower {
            if !deployments.contains(lp.target_deployment.as_str()) {
                e.push(format!(
                    "controllers.lowpower.targetDeployment: unknown deployment {:?}",
                    lp.target_deployment
                ));
            }
            if let Some(h) = &lp.target_hpa {
                if !hpas.contains(h.as_str()) {
                    e.push(format!("controllers.lowpower.targetHpa: unknown autoscaler {h:?}"));
                }
            }
            if !self.resources.iter().any(|r| r.kind == Kind::TeaStoreConfig) {
                e.push("controllers.lowpower: no TeaStoreConfig resource declared".into());
            }
        }
        if let Some(bg) = &self.controllers.bluegreen {
            if !services.contains(bg.service.as_str()) {
                e.push(format!(
                    "controllers.bluegreen.service: unknown service {:?}",
                    bg.service
                ));
            }
            let blue = format!("{}-blue", bg.deployment_prefix);
            let green = format!("{}-green", bg.deployment_prefix);
            if !deployments.contains(blue.as_str()) && !deployments.contains(green.as_str()) {
                e.push(format!(
                    "controllers.bluegreen.deploymentPrefix: neither {blue} nor {green} is declared"
                ));
            }
            if !self.resources.iter().any(|r| r.kind == Kind::RecommenderModel) {
                e.push("controllers.bluegreen: no RecommenderModel resource declared".into());
            }
        }
        if let Some(rules) = &self.controllers.rainbow {
            e.extend(rules.check().into_iter().map(|m| format!("controllers.rainbow: {m}")));
            for (i, g) in rules.bindings.server_groups.iter().enumerate() {
                let at = format!("controllers.rainbow.bindings.serverGroups[{i}]");
                if !deployments.contains(g.deployment.as_str()) {
                    e.push(format!("{at}.deployment: unknown deployment {:?}", g.deployment));
                }
                if let Some(h) = &g.hpa {
                    if !hpas.contains(h.as_str()) {
                        e.push(format!("{at}.hpa: unknown autoscaler {h:?}"));
                    }
                }
                if let Some(c) = &g.config {
                    if !self.resource(Kind::TeaStoreConfig, c) {
                        e.push(format!("{at}.config: unknown TeaStoreConfig {c:?}"));
                    }
                }
            }
            for (i, c) in rules.bindings.connectors.iter().enumerate() {
                if !connectors.contains(c.id.as_str()) {
                    e.push(format!(
                        "controllers.rainbow.bindings.connectors[{i}].id: unknown connector {:?}",
                        c.id
                    ));
                }
            }
            for (i, c) in rules.bindings.components.iter().enumerate() {
                if let Some(client) = &c.client {
                    if !clients.contains(client.as_str()) {
                        e.push(format!(
                            "controllers.rainbow.bindings.components[{i}].client: no workload for {client:?}"
                        ));
                    }
                }
            }
        }

        for (field, p) in [
            ("faults.watchDropProbability", self.faults.watch_drop_probability),
            (
                "faults.adaptCallFailureProbability",
                self.faults.adapt_call_failure_probability,
            ),
        ] {
            if !(0.0..=1.0).contains(&p) {
                e.push(format!("{field}: must be in [0, 1]"));
            }
        }
        let configured = self.controllers.configured();
        for (i, r) in self.faults.controller_restarts.iter().enumerate() {
            if !configured.contains(&r.controller.as_str()) || r.controller == "rainbow" {
                e.push(format!(
                    "faults.controllerRestarts[{i}].controller: {:?} is not a configured operator",
                    r.controller
                ));
            }
            if r.when().resolve(0).is_none() {
                e.push(format!(
                    "faults.controllerRestarts[{i}]: give exactly one of atEpochSeconds or atOffsetSeconds"
                ));
            }
        }
        for (i, s) in self.faults.scripted_events.iter().enumerate() {
            if s.when().resolve(0).is_none() {
                e.push(format!(
                    "faults.scriptedEvents[{i}]: give exactly one of atEpochSeconds or atOffsetSeconds"
                ));
            }
            if s.event_type == BroadcastType::OutOfMemory {
                let owner = s.source_pod.rsplit_once('-').map(|(d, _)| d);
                if !owner.is_some_and(|d| deployments.contains(d)) {
                    e.push(format!(
                        "faults.scriptedEvents[{i}].sourcePod: {:?} belongs to no declared deployment",
                        s.source_pod
                    ));
                }
            }
        }
        for (i, s) in self.script.iter().enumerate() {
            if s.when().resolve(0).is_none() {
                e.push(format!(
                    "script[{i}]: give exactly one of atEpochSeconds or atOffsetSeconds"
                ));
            }
            if let ScriptAction::PatchSpec { kind, name, .. } = &s.action {
                if !self.resource(*kind, name) {
                    e.push(format!("script[{i}].action: unknown {kind} {name:?}"));
                }
            }
        }
        match &self.goal {
            Some(Goal::AllPodsLowPower { deployment }) if !deployments.contains(deployment.as_str()) => {
                e.push(format!("goal.deployment: unknown deployment {deployment:?}"))
            }
            Some(Goal::RolloutComplete { resource, .. }) if !self.resource(Kind::RecommenderModel, resource) => {
                e.push(format!("goal.resource: unknown RecommenderModel {resource:?}"))
            }
            Some(Goal::ConnectorProperty { connector, .. }) if !connectors.contains(connector.as_str()) => {
                e.push(format!("goal.connector: unknown connector {connector:?}"))
            }
            Some(Goal::SpecEquals { kind, name, .. }) if !self.resource(*kind, name) => {
                e.push(format!("goal: unknown {kind} {name:?}"))
            }
            _ => {}
        }
        e
    }
}

fn strip_location(message: &str) -> String {
    match message.rfind(" at line ") {
        Some(i) => message[..i].to_string(),
        None => message.to_string(),
    }
}
