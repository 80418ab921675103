//! Rule file: model bindings, indications, invariants, patterns and
//! strategies.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::matcher::SequencePattern;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "==")]
    Eq,
}

impl Comparator {
    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparator::Gt => lhs > rhs,
            Comparator::Ge => lhs >= rhs,
            Comparator::Lt => lhs < rhs,
            Comparator::Le => lhs <= rhs,
            Comparator::Eq => lhs == rhs,
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Eq => "==",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ServerGroupBinding {
    pub id: String,
    pub deployment: String,
    /// maxReplicas is read from this autoscaler when given.
    #[serde(default)]
    pub hpa: Option<String>,
    #[serde(default)]
    pub max_replicas: Option<u32>,
    /// TeaStoreConfig resource that carries the group's power mode.
    #[serde(default)]
    pub config: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ComponentBinding {
    pub id: String,
    /// Measured at a single pod.
    #[serde(default)]
    pub pod: Option<String>,
    /// Measured end to end at a client, network round trip included.
    #[serde(default)]
    pub client: Option<String>,
    #[serde(default)]
    pub connector: Option<String>,
    #[serde(default)]
    pub server_group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ConnectorBinding {
    /// Id of the simulated connector.
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Bindings {
    #[serde(default)]
    pub server_groups: Vec<ServerGroupBinding>,
    #[serde(default)]
    pub components: Vec<ComponentBinding>,
    #[serde(default)]
    pub connectors: Vec<ConnectorBinding>,
}

/// Emits an indication event for every component whose property satisfies
/// the comparison at a model sync.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct IndicationRule {
    pub symbol: String,
    pub property: String,
    pub comparator: Comparator,
    pub threshold: f64,
}

/// Holds while `property comparator threshold` is false; a component for
/// which the comparison is true violates it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct InvariantRule {
    #[serde(default)]
    pub name: Option<String>,
    pub property: String,
    pub comparator: Comparator,
    pub threshold: f64,
    pub strategy: String,
}

impl InvariantRule {
    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{} {} {}", self.property, self.comparator, self.threshold))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Target {
    Component,
    ServerGroup,
    Connector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Guard {
    pub target: Target,
    pub property: String,
    pub comparator: Comparator,
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Compare against another property of the same target instead.
    #[serde(default, rename = "ref")]
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "camelCase", deny_unknown_fields)]
pub enum Effector {
    AddServer,
    ChangeParam { key: String, value: String },
    SetProperty { key: String, value: String },
}

impl Effector {
    pub fn name(&self) -> &'static str {
        match self {
            Effector::AddServer => "addServer",
            Effector::ChangeParam { .. } => "changeParam",
            Effector::SetProperty { .. } => "setProperty",
        }
    }

    pub fn target(&self) -> Target {
        match self {
            Effector::AddServer | Effector::ChangeParam { .. } => Target::ServerGroup,
            Effector::SetProperty { .. } => Target::Connector,
        }
    }
}

impl fmt::Display for Effector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Effector::AddServer => f.write_str("addServer()"),
            Effector::ChangeParam { key, value } => write!(f, "changeParam({key:?}, {value:?})"),
            Effector::SetProperty { key, value } => write!(f, "setProperty({key:?}, {value:?})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Tactic {
    pub guard: Guard,
    pub effector: Effector,
}

/// Tactics are tried in order; the first whose guard holds is selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct StrategyRule {
    pub name: String,
    pub tactics: Vec<Tactic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RuleFile {
    #[serde(default = "default_sync_period")]
    pub sync_period_seconds: i64,
    #[serde(default = "default_cooldown")]
    pub cooldown_periods: u64,
    #[serde(default)]
    pub bindings: Bindings,
    #[serde(default)]
    pub indications: Vec<IndicationRule>,
    #[serde(default)]
    pub invariants: Vec<InvariantRule>,
    #[serde(default)]
    pub patterns: Vec<SequencePattern>,
    #[serde(default)]
    pub strategies: Vec<StrategyRule>,
}

fn default_sync_period() -> i64 {
    10
}
fn default_cooldown() -> u64 {
    2
}

pub const COMPONENT_PROPERTIES: &[&str] = &["responseTime", "usedMemory"];
pub const SERVER_GROUP_PROPERTIES: &[&str] = &["replicas", "maxReplicas", "usedMemory"];
pub const CONNECTOR_PROPERTIES: &[&str] = &["roundTripLatency"];

fn known(target: Target) -> &'static [&'static str] {
    match target {
        Target::Component => COMPONENT_PROPERTIES,
        Target::ServerGroup => SERVER_GROUP_PROPERTIES,
        Target::Connector => CONNECTOR_PROPERTIES,
    }
}

impl RuleFile {
    pub fn strategy(&self, name: &str) -> Option<&StrategyRule> {
        self.strategies.iter().find(|s| s.name == name)
    }

    /// Internal consistency: every reference resolves and every property is
    /// one the model exposes.
    pub fn check(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.sync_period_seconds <= 0 {
            errors.push("syncPeriodSeconds must be positive".to_string());
        }
        let groups: BTreeSet<&str> = self.bindings.server_groups.iter().map(|g| g.id.as_str()).collect();
        let connectors: BTreeSet<&str> = self.bindings.connectors.iter().map(|c| c.id.as_str()).collect();
        for g in &self.bindings.server_groups {
            if g.hpa.is_none() && g.max_replicas.is_none() {
                errors.push(format!("server group {}: needs hpa or maxReplicas", g.id));
            }
        }
        for c in &self.bindings.components {
            if c.pod.is_some() == c.client.is_some() {
                errors.push(format!("component {}: bind exactly one of pod or client", c.id));
            }
            if let Some(g) = &c.server_group {
                if !groups.contains(g.as_str()) {
                    errors.push(format!("component {}: unknown server group {g}", c.id));
                }
            }
            if let Some(k) = &c.connector {
                if !connectors.contains(k.as_str()) {
                    errors.push(format!("component {}: unknown connector {k}", c.id));
                }
            }
        }
        for i in &self.indications {
            if !COMPONENT_PROPERTIES.contains(&i.property.as_str()) {
                errors.push(format!(
                    "indication {}: unknown component property {}",
                    i.symbol, i.property
                ));
            }
        }
        for inv in &self.invariants {
            if !COMPONENT_PROPERTIES.contains(&inv.property.as_str()) {
                errors.push(format!(
                    "invariant {}: unknown component property {}",
                    inv.label(),
                    inv.property
                ));
            }
            if self.strategy(&inv.strategy).is_none() {
                errors.push(format!("invariant {}: unknown strategy {}", inv.label(), inv.strategy));
            }
        }
        let symbols: BTreeSet<&str> = self.indications.iter().map(|i| i.symbol.as_str()).collect();
        for p in &self.patterns {
            if p.symbols.is_empty() {
                errors.push(format!("pattern {}: no symbols", p.name));
            }
            for s in &p.symbols {
                if !symbols.contains(s.symbol.as_str()) {
                    errors.push(format!("pattern {}: symbol {} is never indicated", p.name, s.symbol));
                }
            }
            match &p.strategy {
                Some(s) if self.strategy(s).is_none() => {
                    errors.push(format!("pattern {}: unknown strategy {s}", p.name))
                }
                _ => {}
            }
        }
        for s in &self.strategies {
            for (i, t) in s.tactics.iter().enumerate() {
                let g = &t.guard;
                if g.threshold.is_some() == g.reference.is_some() {
                    errors.push(format!(
                        "strategy {} tactic {i}: give exactly one of threshold or ref",
                        s.name
                    ));
                }
                let props = known(g.target);
                for p in std::iter::once(&g.property).chain(g.reference.as_ref()) {
                    if !props.contains(&p.as_str()) {
                        errors.push(format!("strategy {} tactic {i}: unknown property {p}", s.name));
                    }
                }
                if let Effector::ChangeParam { key, .. } = &t.effector {
                    if key != "power_mode" {
                        errors.push(format!("strategy {} tactic {i}: unsupported parameter {key}", s.name));
                    }
                }
            }
        }
        errors
    }
}
