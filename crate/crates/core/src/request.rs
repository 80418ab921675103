//! Simulated client requests and responses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimRequest {
    pub id: String,
    pub client: String,
    #[serde(default)]
    pub origin_connector: Option<String>,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
}

impl SimRequest {
    pub fn new(id: impl Into<String>, client: impl Into<String>) -> Self {
        SimRequest {
            id: id.into(),
            client: client.into(),
            origin_connector: None,
            headers: BTreeMap::new(),
        }
    }

    pub fn via(mut self, connector: impl Into<String>) -> Self {
        self.origin_connector = Some(connector.into());
        self
    }

    /// A downstream call made on behalf of this request, carrying no headers yet.
    pub fn child(&self, hop: &str) -> SimRequest {
        SimRequest {
            id: format!("{}/{}", self.id, hop),
            client: self.client.clone(),
            origin_connector: self.origin_connector.clone(),
            headers: BTreeMap::new(),
        }
    }
}

/// Where a client-visible response came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "kind")]
pub enum Origin {
    Pod { pod: String, deployment: String },
    Fallback { service: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimResponse {
    pub request_id: String,
    pub origin: Origin,
    pub latency_ms: f64,
    pub completes_at: i64,
    #[serde(default)]
    pub variant: Option<String>,
}
