//! Spec and status records of the built-in workload kinds, as stored in the
//! resource store.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum PodPhase {
    #[default]
    Pending,
    Running,
    Terminating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerMode {
    #[default]
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PodTemplate {
    pub image: String,
    #[serde(default = "default_flavor")]
    pub flavor: String,
    pub memory_limit_bytes: u64,
    /// Workload profile driving memory and latency; defaults to the owner's name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
}

fn default_flavor() -> String {
    "default".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PodSpec {
    pub image: String,
    pub flavor: String,
    pub memory_limit_bytes: u64,
    pub owner_deployment: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PodStatus {
    pub phase: PodPhase,
    #[serde(rename = "podIP")]
    pub pod_ip: String,
    pub memory_used_bytes: u64,
    pub response_time_ms: f64,
    pub power_mode: PowerMode,
    pub in_flight_requests: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeploymentSpec {
    pub replicas: u32,
    pub template: PodTemplate,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeploymentStatus {
    pub ready_replicas: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HpaSpec {
    pub target_deployment: String,
    pub min_replicas: u32,
    pub max_replicas: u32,
    pub target_utilization_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HpaStatus {
    pub current_replicas: u32,
    pub current_utilization_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ServiceSpec {
    pub selector: BTreeMap<String, String>,
    /// Dark-launch target: matching pods receive copies of every request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mirror_selector: Option<BTreeMap<String, String>>,
    /// Static non-ML backend used when no pod is selectable or when forced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
    #[serde(default)]
    pub fallback_active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BroadcastType {
    OutOfMemory,
    DatabaseUnavailable,
    DDoSAttack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BroadcastEvent {
    pub event_type: BroadcastType,
    #[serde(default)]
    pub source_pod: String,
    pub at_epoch_seconds: i64,
    #[serde(default)]
    pub payload: BTreeMap<String, String>,
}

/// Logical adaptation state of a pod, served by the GET endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationState {
    #[serde(rename = "low_power_enabled")]
    pub low_power_enabled: bool,
    #[serde(rename = "active_flavor")]
    pub active_flavor: String,
    #[serde(rename = "cache_enabled")]
    pub cache_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AdaptAction {
    SetPowerMode(PowerMode),
    SetFlavor(String),
}
