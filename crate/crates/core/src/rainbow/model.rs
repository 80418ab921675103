//! Architectural projection of the cluster: components, connectors and
//! server groups, refreshed from simulated state at each model sync.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::rules::{Bindings, Target};
use crate::clock::EpochSeconds;
use crate::operators::TeaStoreConfigSpec;
use crate::sim::{Cluster, DeploymentSpec, HpaSpec, PodPhase};
use crate::store::{Kind, DEFAULT_NAMESPACE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ArchComponent {
    pub id: String,
    /// Moving average over the last few requests, in milliseconds.
    pub response_time: f64,
    pub used_memory: f64,
    pub bound_pod: Option<String>,
    pub bound_client: Option<String>,
    pub connector: Option<String>,
    pub server_group: Option<String>,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ArchConnector {
    pub id: String,
    pub round_trip_latency: f64,
    pub properties: BTreeMap<String, String>,
    pub bound_client: String,
    pub bound_service: String,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ServerGroup {
    pub id: String,
    pub replicas: u32,
    pub max_replicas: u32,
    pub used_memory: f64,
    pub bound_deployment: String,
    pub bound_hpa: Option<String>,
    pub fixed_max_replicas: Option<u32>,
    pub config: Option<String>,
    pub power_mode: String,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ArchModel {
    pub components: BTreeMap<String, ArchComponent>,
    pub connectors: BTreeMap<String, ArchConnector>,
    pub server_groups: BTreeMap<String, ServerGroup>,
}

impl ArchModel {
    pub fn from_bindings(b: &Bindings) -> Self {
        let mut m = ArchModel::default();
        for g in &b.server_groups {
            m.server_groups.insert(
                g.id.clone(),
                ServerGroup {
                    id: g.id.clone(),
                    replicas: 0,
                    max_replicas: g.max_replicas.unwrap_or(0),
                    used_memory: 0.0,
                    bound_deployment: g.deployment.clone(),
                    bound_hpa: g.hpa.clone(),
                    fixed_max_replicas: g.max_replicas,
                    config: g.config.clone(),
                    power_mode: "high".into(),
                    stale: true,
                },
            );
        }
        for c in &b.connectors {
            m.connectors.insert(
                c.id.clone(),
                ArchConnector {
                    id: c.id.clone(),
                    round_trip_latency: 0.0,
                    properties: BTreeMap::new(),
                    bound_client: String::new(),
                    bound_service: String::new(),
                    stale: true,
                },
            );
        }
        for c in &b.components {
            m.components.insert(
                c.id.clone(),
                ArchComponent {
                    id: c.id.clone(),
                    response_time: 0.0,
                    used_memory: 0.0,
                    bound_pod: c.pod.clone(),
                    bound_client: c.client.clone(),
                    connector: c.connector.clone(),
                    server_group: c.server_group.clone(),
                    stale: true,
                },
            );
        }
        m
    }

    /// Refreshes every property from the cluster. Elements whose bound
    /// resource is gone (or has produced no measurement yet) become stale.
    pub fn sync(&mut self, cluster: &Cluster, now: EpochSeconds) {
        for g in self.server_groups.values_mut() {
            let Ok(dep) = cluster
                .store
                .get(Kind::Deployment, DEFAULT_NAMESPACE, &g.bound_deployment)
            else {
                g.stale = true;
                continue;
            };
            let Ok(spec) = dep.spec_as::<DeploymentSpec>() else {
                g.stale = true;
                continue;
            };
            g.replicas = spec.replicas;
            g.max_replicas = match (&g.bound_hpa, g.fixed_max_replicas) {
                (Some(h), fixed) => cluster
                    .store
                    .get(Kind::HorizontalPodAutoscaler, DEFAULT_NAMESPACE, h)
                    .ok()
                    .and_then(|r| r.spec_as::<HpaSpec>().ok())
                    .map(|s| s.max_replicas)
                    .or(fixed)
                    .unwrap_or(spec.replicas),
                (None, fixed) => fixed.unwrap_or(spec.replicas),
            };
            let ratios: Vec<f64> = cluster
                .pods()
                .filter(|p| p.deployment == g.bound_deployment && p.phase == PodPhase::Running)
                .map(|p| p.used_memory_ratio())
                .collect();
            g.used_memory = if ratios.is_empty() {
                0.0
            } else {
                ratios.iter().sum::<f64>() / ratios.len() as f64
            };
            g.power_mode = g
                .config
                .as_ref()
                .and_then(|c| cluster.store.get(Kind::TeaStoreConfig, DEFAULT_NAMESPACE, c).ok())
                .and_then(|r| r.spec_as::<TeaStoreConfigSpec>().ok())
                .map_or("high", |s| if s.low_power_adaptation { "low" } else { "high" })
                .to_string();
            g.stale = false;
        }
        for k in self.connectors.values_mut() {
            match (cluster.connector(&k.id), cluster.connector_rtt(&k.id, now)) {
                (Some(c), Some(rtt)) => {
                    k.round_trip_latency = rtt;
                    k.properties = c.properties.clone();
                    k.bound_client = c.spec.client.clone();
                    k.bound_service = c.spec.service.clone();
                    k.stale = false;
                }
                _ => k.stale = true,
            }
        }
        for c in self.components.values_mut() {
            let group_memory = c
                .server_group
                .as_ref()
                .and_then(|g| self.server_groups.get(g))
                .filter(|g| !g.stale)
                .map(|g| g.used_memory);
            if let Some(pod) = &c.bound_pod {
                match cluster.pod(pod).filter(|p| p.phase == PodPhase::Running) {
                    Some(p) if !p.latencies.is_empty() => {
                        c.response_time = p.response_time_ms();
                        c.used_memory = p.used_memory_ratio();
                        c.stale = false;
                    }
                    _ => c.stale = true,
                }
            } else if let Some(client) = &c.bound_client {
                match cluster.client(client) {
                    Some(s) if !s.end_to_end_ms.is_empty() => {
                        c.response_time = s.response_time_ms();
                        c.used_memory = group_memory.unwrap_or(0.0);
                        c.stale = false;
                    }
                    _ => c.stale = true,
                }
            }
        }
    }

    pub fn property(&self, target: Target, id: &str, name: &str) -> Option<f64> {
        match target {
            Target::Component => {
                let c = self.components.get(id).filter(|c| !c.stale)?;
                match name {
                    "responseTime" => Some(c.response_time),
                    "usedMemory" => Some(c.used_memory),
                    _ => None,
                }
            }
            Target::ServerGroup => {
                let g = self.server_groups.get(id).filter(|g| !g.stale)?;
                match name {
                    "replicas" => Some(g.replicas as f64),
                    "maxReplicas" => Some(g.max_replicas as f64),
                    "usedMemory" => Some(g.used_memory),
                    _ => None,
                }
            }
            Target::Connector => {
                let k = self.connectors.get(id).filter(|k| !k.stale)?;
                match name {
                    "roundTripLatency" => Some(k.round_trip_latency),
                    _ => None,
                }
            }
        }
    }
}
