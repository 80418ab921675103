//! Architecture-based adaptation loop.
//!
//! Each model sync refreshes the architectural model from the cluster
//! (monitor), derives indication events and invariant violations, feeds the
//! indications through sequence matchers (analyse), selects a tactic without
//! touching anything (plan) and finally applies its effector (execute).

mod matcher;
mod model;
mod rules;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use matcher::{IndicationEvent, Matcher, SequenceMatch, SequencePattern, SymbolSpec};
pub use model::{ArchComponent, ArchConnector, ArchModel, ServerGroup};
pub use rules::{
    Bindings, Comparator, ComponentBinding, ConnectorBinding, Effector, Guard, IndicationRule, InvariantRule, RuleFile,
    ServerGroupBinding, StrategyRule, Tactic, Target, COMPONENT_PROPERTIES, CONNECTOR_PROPERTIES,
    SERVER_GROUP_PROPERTIES,
};

use crate::clock::EpochSeconds;
use crate::operators::TeaStoreConfigSpec;
use crate::sim::{Cluster, DeploymentSpec};
use crate::store::{Kind, Resource, StoreError, DEFAULT_NAMESPACE};
use crate::trace::TraceEvent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AdaptationEvent {
    pub strategy_name: String,
    pub subject_id: String,
    /// Provenance: `cause` is `invariant` or `pattern`, plus its name.
    pub bindings: BTreeMap<String, String>,
}

/// Outcome of planning: the chosen tactic, if any, and why others were not.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Plan {
    pub strategy: String,
    pub subject_id: String,
    pub tactic: Option<usize>,
    pub effector: Option<Effector>,
    pub target_id: Option<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ExecutionReport {
    pub selected_strategy: Option<String>,
    pub subject_id: String,
    pub effector_action: Option<String>,
    pub target_id: Option<String>,
    pub success: bool,
    /// Store writes plus connector mutations observed while planning.
    pub planning_writes: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Mape {
    rules: RuleFile,
    model: ArchModel,
    matchers: Vec<Matcher>,
    last_fired: BTreeMap<(usize, String), u64>,
    tick: u64,
    events: Vec<TraceEvent>,
}

fn connector_fingerprint(cluster: &Cluster) -> Vec<(String, BTreeMap<String, String>)> {
    cluster
        .connectors()
        .map(|c| (c.spec.id.clone(), c.properties.clone()))
        .collect()
}

impl Mape {
    pub fn new(rules: RuleFile) -> Self {
        let model = ArchModel::from_bindings(&rules.bindings);
        let matchers = rules.patterns.iter().cloned().map(Matcher::new).collect();
        Mape {
            rules,
            model,
            matchers,
            last_fired: BTreeMap::new(),
            tick: 0,
            events: Vec::new(),
        }
    }

    pub fn rules(&self) -> &RuleFile {
        &self.rules
    }

    pub fn model(&self) -> &ArchModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ArchModel {
        &mut self.model
    }

    pub fn sync_period(&self) -> i64 {
        self.rules.sync_period_seconds
    }

    pub fn drain_events(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.events)
    }

    /// Monitor: refresh the model and derive indication events.
    pub fn sync_model(&mut self, cluster: &Cluster, now: EpochSeconds) -> Vec<IndicationEvent> {
        self.model.sync(cluster, now);
        let groups: BTreeMap<_, _> = self
            .model
            .server_groups
            .values()
            .map(|g| {
                (
                    g.id.clone(),
                    json!({"replicas": g.replicas, "maxReplicas": g.max_replicas,
                           "usedMemory": g.used_memory, "powerMode": g.power_mode, "stale": g.stale}),
                )
            })
            .collect();
        let components: BTreeMap<_, _> = self
            .model
            .components
            .values()
            .map(|c| (c.id.clone(), json!({"responseTime": c.response_time, "stale": c.stale})))
            .collect();
        self.events.push(TraceEvent::new(
            "model_sync",
            "rainbow",
            json!({"tick": self.tick, "serverGroups": groups, "components": components}),
        ));
        let mut out = Vec::new();
        for rule in &self.rules.indications {
            for c in self.model.components.values().filter(|c| !c.stale) {
                let Some(v) = self.model.property(Target::Component, &c.id, &rule.property) else {
                    continue;
                };
                if rule.comparator.holds(v, rule.threshold) {
                    let ev = IndicationEvent {
                        symbol: rule.symbol.clone(),
                        subject_id: c.id.clone(),
                        at_time: now,
                        value: v,
                    };
                    self.events.push(TraceEvent::new("indication", c.id.clone(), json!(ev)));
                    out.push(ev);
                }
            }
        }
        out
    }

    /// Analyse: invariant violations, at most one per (invariant, subject)
    /// per cooldown.
    pub fn evaluate_invariants(&mut self) -> Vec<AdaptationEvent> {
        let mut out = Vec::new();
        for (idx, inv) in self.rules.invariants.iter().enumerate() {
            for c in self.model.components.values().filter(|c| !c.stale) {
                let Some(v) = self.model.property(Target::Component, &c.id, &inv.property) else {
                    continue;
                };
                if !inv.comparator.holds(v, inv.threshold) {
                    continue;
                }
                let key = (idx, c.id.clone());
                let cooled = self
                    .last_fired
                    .get(&key)
                    .is_none_or(|&last| self.tick - last >= self.rules.cooldown_periods);
                self.events.push(TraceEvent::new(
                    "invariant_violation",
                    c.id.clone(),
                    json!({"invariant": inv.label(), "value": v, "threshold": inv.threshold,
                           "suppressed": !cooled}),
                ));
                if cooled {
                    self.last_fired.insert(key, self.tick);
                    out.push(AdaptationEvent {
                        strategy_name: inv.strategy.clone(),
                        subject_id: c.id.clone(),
                        bindings: [("cause", "invariant".to_string()), ("invariant", inv.label())]
                            .into_iter()
                            .map(|(k, v)| (k.to_string(), v))
                            .collect(),
                    });
                }
            }
        }
        out
    }

    /// Analyse: feed one indication through every pattern.
    pub fn match_sequence(&mut self, ev: &IndicationEvent) -> Vec<AdaptationEvent> {
        let mut out = Vec::new();
        for m in &mut self.matchers {
            if let Some(hit) = m.feed(ev) {
                self.events.push(TraceEvent::new(
                    "pattern_match",
                    hit.subject_id.clone(),
                    json!({"pattern": hit.pattern, "events": hit.events}),
                ));
                if let Some(strategy) = &m.pattern().strategy {
                    out.push(AdaptationEvent {
                        strategy_name: strategy.clone(),
                        subject_id: hit.subject_id.clone(),
                        bindings: [("cause", "pattern".to_string()), ("pattern", hit.pattern.clone())]
                            .into_iter()
                            .map(|(k, v)| (k.to_string(), v))
                            .collect(),
                    });
                }
            }
        }
        out
    }

    fn target_of(&self, subject: &str, target: Target) -> Option<String> {
        let c = self.model.components.get(subject)?;
        match target {
            Target::Component => Some(c.id.clone()),
            Target::ServerGroup => c.server_group.clone(),
            Target::Connector => c.connector.clone(),
        }
    }

    /// Plan: choose the first tactic whose guard holds and whose effect is
    /// not already in place. Reads the model only.
    pub fn plan(&self, ev: &AdaptationEvent) -> Plan {
        let mut plan = Plan {
            strategy: ev.strategy_name.clone(),
            subject_id: ev.subject_id.clone(),
            tactic: None,
            effector: None,
            target_id: None,
            notes: Vec::new(),
        };
        let Some(strategy) = self.rules.strategy(&ev.strategy_name) else {
            plan.notes.push(format!("unknown strategy {}", ev.strategy_name));
            return plan;
        };
        for (i, t) in strategy.tactics.iter().enumerate() {
            let g = &t.guard;
            let Some(id) = self.target_of(&ev.subject_id, g.target) else {
                plan.notes.push(format!("tactic {i}: subject has no {:?}", g.target));
                continue;
            };
            let Some(lhs) = self.model.property(g.target, &id, &g.property) else {
                plan.notes.push(format!("tactic {i}: {id}.{} unavailable", g.property));
                continue;
            };
            let rhs = match (&g.reference, g.threshold) {
                (Some(r), _) => self.model.property(g.target, &id, r),
                (None, t) => t,
            };
            let Some(rhs) = rhs else {
                plan.notes.push(format!("tactic {i}: guard operand unavailable"));
                continue;
            };
            if !g.comparator.holds(lhs, rhs) {
                plan.notes.push(format!(
                    "tactic {i}: {id}.{} = {lhs} not {} {rhs}",
                    g.property, g.comparator
                ));
                continue;
            }
            let Some(effect_id) = self.target_of(&ev.subject_id, t.effector.target()) else {
                plan.notes
                    .push(format!("tactic {i}: no target for {}", t.effector.name()));
                continue;
            };
            if self.already_applied(&t.effector, &effect_id) {
                plan.notes
                    .push(format!("tactic {i}: {} already in effect on {effect_id}", t.effector));
                continue;
            }
            plan.tactic = Some(i);
            plan.effector = Some(t.effector.clone());
            plan.target_id = Some(effect_id);
            break;
        }
        plan
    }

    fn already_applied(&self, effector: &Effector, id: &str) -> bool {
        match effector {
            Effector::AddServer => false,
            Effector::ChangeParam { value, .. } => {
                self.model.server_groups.get(id).is_some_and(|g| &g.power_mode == value)
            }
            Effector::SetProperty { key, value } => self
                .model
                .connectors
                .get(id)
                .is_some_and(|k| k.properties.get(key) == Some(value)),
        }
    }

    /// Execute the planned effector. Store conflicts are retried once.
    pub fn execute(&mut self, plan: &Plan, cluster: &mut Cluster) -> Result<(), String> {
        let (Some(effector), Some(id)) = (&plan.effector, &plan.target_id) else {
            return Ok(());
        };
        match effector {
            Effector::AddServer => {
                let g = self.model.server_groups.get(id).ok_or("unknown server group")?;
                let deployment = g.bound_deployment.clone();
                retry_once(cluster, Kind::Deployment, &deployment, |r| {
                    let mut spec: DeploymentSpec = r.spec_as()?;
                    spec.replicas += 1;
                    r.spec = serde_json::to_value(spec).expect("spec serializes");
                    Ok(())
                })
            }
            Effector::ChangeParam { key, value } => {
                if key != "power_mode" {
                    return Err(format!("unsupported parameter {key}"));
                }
                let g = self.model.server_groups.get(id).ok_or("unknown server group")?;
                let config = g.config.clone().ok_or("server group has no config resource")?;
                let low = value == "low";
                retry_once(cluster, Kind::TeaStoreConfig, &config, |r| {
                    let mut spec: TeaStoreConfigSpec = r.spec_as()?;
                    spec.low_power_adaptation = low;
                    r.spec = serde_json::to_value(spec).expect("spec serializes");
                    Ok(())
                })
            }
            Effector::SetProperty { key, value } => {
                if cluster.set_connector_property(id, key, value) {
                    Ok(())
                } else {
                    Err(format!("unknown connector {id}"))
                }
            }
        }
    }

    pub fn plan_and_execute(
        &mut self,
        ev: &AdaptationEvent,
        cluster: &mut Cluster,
        now: EpochSeconds,
    ) -> ExecutionReport {
        let writes_before = cluster.store.write_count();
        let connectors_before = connector_fingerprint(cluster);
        let plan = self.plan(ev);
        let mut planning_writes = cluster.store.write_count() - writes_before;
        if connector_fingerprint(cluster) != connectors_before {
            planning_writes += 1;
        }
        let result = self.execute(&plan, cluster);
        if result.is_ok() && plan.effector.is_some() {
            self.model.sync(cluster, now);
        }
        let report = ExecutionReport {
            selected_strategy: plan.effector.as_ref().map(|_| plan.strategy.clone()),
            subject_id: ev.subject_id.clone(),
            effector_action: plan.effector.as_ref().map(ToString::to_string),
            target_id: plan.target_id.clone(),
            success: plan.effector.is_some() && result.is_ok(),
            planning_writes,
            error: result.err(),
        };
        self.events.push(TraceEvent::new(
            "adaptation",
            ev.subject_id.clone(),
            json!({
                "strategy": ev.strategy_name,
                "cause": ev.bindings,
                "selectedStrategy": report.selected_strategy,
                "tactic": plan.tactic,
                "action": plan.effector.as_ref().map(Effector::name),
                "effector": report.effector_action,
                "target": report.target_id,
                "success": report.success,
                "planningWrites": report.planning_writes,
                "error": report.error,
                "notes": plan.notes,
            }),
        ));
        report
    }

    /// One full loop iteration at a model-sync instant.
    pub fn tick(&mut self, cluster: &mut Cluster, now: EpochSeconds) -> Vec<ExecutionReport> {
        let indications = self.sync_model(cluster, now);
        let mut pending = Vec::new();
        for ev in &indications {
            pending.extend(self.match_sequence(ev));
        }
        pending.extend(self.evaluate_invariants());
        let reports = pending
            .iter()
            .map(|ev| self.plan_and_execute(ev, cluster, now))
            .collect();
        self.tick += 1;
        reports
    }
}

fn retry_once(
    cluster: &mut Cluster,
    kind: Kind,
    name: &str,
    mut edit: impl FnMut(&mut Resource) -> Result<(), StoreError>,
) -> Result<(), String> {
    for _ in 0..2 {
        let current = cluster
            .store
            .get(kind, DEFAULT_NAMESPACE, name)
            .map_err(|e| e.to_string())?;
        let mut next = current.clone();
        edit(&mut next).map_err(|e| e.to_string())?;
        let outcome = cluster
            .store
            .update_spec(&next, current.version())
            .map_err(|e| e.to_string())?;
        if outcome.accepted {
            return Ok(());
        }
    }
    Err(format!("conflict writing {kind}/{name} twice"))
}

#[cfg(test)]
mod tests;
