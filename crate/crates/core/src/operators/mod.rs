//! Adaptation operators: low-power enforcement driven by aggregated
//! out-of-memory events, and blue-green rollout of recommender models.

mod bluegreen;
mod lowpower;

use serde::{Deserialize, Serialize};

pub use bluegreen::{BlueGreenConfig, BlueGreenOperator};
pub use lowpower::{LowPowerConfig, LowPowerOperator};

use crate::sim::SimError;
use crate::store::StoreError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TeaStoreConfigSpec {
    pub low_power_adaptation: bool,
    /// Aggregation window in seconds.
    pub time_interval: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TeaStoreConfigStatus {
    #[serde(default)]
    pub out_of_memory_count: u32,
    #[serde(default)]
    pub epoch_start_time_interval: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    #[default]
    Blue,
    Green,
}

impl Color {
    pub fn other(self) -> Color {
        match self {
            Color::Blue => Color::Green,
            Color::Green => Color::Blue,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Color::Blue => "blue",
            Color::Green => "green",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RolloutPhase {
    #[default]
    Stable,
    Training,
    Switching,
    Draining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RecommenderModelSpec {
    pub model_flavor: String,
    #[serde(default)]
    pub instant_switch: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RecommenderModelStatus {
    pub active_color: Color,
    pub active_flavor: String,
    pub phase: RolloutPhase,
    pub training_progress: f64,
    /// First instant the old color was seen with nothing in flight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drained_at: Option<i64>,
}

/// Failures inside a reconcile, reported as an error result.
#[derive(Debug, thiserror::Error)]
pub enum OperatorError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Missing(String),
}
