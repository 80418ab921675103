use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{OperatorError, TeaStoreConfigSpec, TeaStoreConfigStatus};
use crate::engine::{ReconcileContext, ReconcileRequest, ReconcileResult, Reconciler};
use crate::sim::{
    AdaptAction, BroadcastEvent, BroadcastType, Cluster, DeploymentSpec, HpaSpec, HpaStatus, PodPhase, PodStatus,
    PowerMode,
};
use crate::store::{Kind, StoreError, DEFAULT_NAMESPACE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct LowPowerConfig {
    #[serde(default = "default_threshold")]
    pub oom_threshold: u32,
    pub target_deployment: String,
    /// Without an autoscaler the deployment can never scale out, so the
    /// max-replicas gate is always open.
    #[serde(default)]
    pub target_hpa: Option<String>,
    /// Defaults to the target deployment's pod labels.
    #[serde(default)]
    pub pod_selector: Option<BTreeMap<String, String>>,
    #[serde(default = "default_requeue")]
    pub requeue_after_seconds: u64,
}

fn default_threshold() -> u32 {
    3
}
fn default_requeue() -> u64 {
    60
}

impl LowPowerConfig {
    pub fn new(target_deployment: impl Into<String>, target_hpa: Option<String>) -> Self {
        LowPowerConfig {
            oom_threshold: default_threshold(),
            target_deployment: target_deployment.into(),
            target_hpa,
            pod_selector: None,
            requeue_after_seconds: default_requeue(),
        }
    }
}

/// Counts out-of-memory events per window into TeaStoreConfig status, flips
/// `spec.lowPowerAdaptation` once the threshold is reached, then keeps every
/// running pod of the target deployment in low-power mode.
#[derive(Debug, Clone)]
pub struct LowPowerOperator {
    config: LowPowerConfig,
}

impl LowPowerOperator {
    pub fn new(config: LowPowerConfig) -> Self {
        LowPowerOperator { config }
    }

    pub fn config(&self) -> &LowPowerConfig {
        &self.config
    }

    fn hpa_at_max(&self, cluster: &Cluster) -> Result<bool, OperatorError> {
        let Some(name) = &self.config.target_hpa else {
            return Ok(true);
        };
        let hpa = cluster
            .store
            .get(Kind::HorizontalPodAutoscaler, DEFAULT_NAMESPACE, name)
            .map_err(|_| OperatorError::Missing(format!("autoscaler {name} not found")))?;
        let spec: HpaSpec = hpa.spec_as()?;
        let status: HpaStatus = hpa.status_as()?;
        Ok(status.current_replicas == spec.max_replicas)
    }

    fn run(&self, request: &ReconcileRequest, ctx: &mut ReconcileContext<'_>) -> Result<(), OperatorError> {
        let mut cr = match ctx.cluster.store.get_key(request) {
            Ok(r) => r,
            Err(StoreError::NotFound(_)) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        let deployment = ctx
            .cluster
            .store
            .get(Kind::Deployment, &request.namespace, &self.config.target_deployment)
            .map_err(|_| OperatorError::Missing(format!("deployment {} not found", self.config.target_deployment)))?;
        let mut spec: TeaStoreConfigSpec = cr.spec_as()?;
        let mut status: TeaStoreConfigStatus = cr.status_as()?;

        if !spec.low_power_adaptation {
            let target = self.config.target_deployment.as_str();
            if ctx.cluster.pending_broadcasts(target) > 0 {
                let at_max = self.hpa_at_max(ctx.cluster)?;
                let events: Vec<BroadcastEvent> = ctx
                    .cluster
                    .take_broadcasts(target)
                    .into_iter()
                    .filter(|e| e.event_type == BroadcastType::OutOfMemory)
                    .collect();
                if !at_max {
                    ctx.note("discarded", events.len());
                } else {
                    let mut counted = 0;
                    for (i, ev) in events.iter().enumerate() {
                        let at = ev.at_epoch_seconds;
                        if at > status.epoch_start_time_interval + spec.time_interval {
                            status.out_of_memory_count = 0;
                            status.epoch_start_time_interval = at;
                        }
                        status.out_of_memory_count += 1;
                        let mut next = cr.clone();
                        next.status = serde_json::to_value(&status).expect("status serializes");
                        match ctx
                            .cluster
                            .store
                            .update_status(&next, cr.version())?
                            .new_resource_version
                        {
                            Some(v) => {
                                next.metadata.resource_version = v;
                                cr = next;
                                counted += 1;
                            }
                            None => {
                                ctx.cluster.requeue_broadcasts(target, events[i..].to_vec());
                                return Err(StoreError::Conflict(cr.key().to_string()).into());
                            }
                        }
                    }
                    ctx.note("counted", counted);
                    ctx.note("outOfMemoryCount", status.out_of_memory_count);
                }
            }
            if status.out_of_memory_count >= self.config.oom_threshold {
                spec.low_power_adaptation = true;
                let mut next = cr.clone();
                next.spec = serde_json::to_value(&spec).expect("spec serializes");
                ctx.cluster
                    .store
                    .update_spec(&next, cr.version())?
                    .committed(&cr.key())?;
                ctx.note("triggered", true);
            }
        }

        if spec.low_power_adaptation {
            let selector = match &self.config.pod_selector {
                Some(s) => s.clone(),
                None => deployment.spec_as::<DeploymentSpec>()?.labels,
            };
            let pods = ctx.cluster.store.list(Kind::Pod, &request.namespace, &selector);
            let (mut adapted, mut failed, mut enforced) = (0, 0, 0);
            for pod in pods {
                let phase = pod.status_as::<PodStatus>().map(|s| s.phase).unwrap_or_default();
                if phase != PodPhase::Running {
                    continue;
                }
                enforced += 1;
                match ctx.cluster.query_adaptation(pod.name()) {
                    Ok(state) if state.low_power_enabled => {}
                    Ok(_) => match ctx
                        .cluster
                        .adapt_pod(pod.name(), &AdaptAction::SetPowerMode(PowerMode::Low))
                    {
                        Ok(()) => adapted += 1,
                        Err(_) => failed += 1,
                    },
                    Err(_) => failed += 1,
                }
            }
            ctx.note("enforced", enforced);
            ctx.note("adapted", adapted);
            ctx.note("failed", failed);
        }
        Ok(())
    }
}

impl Reconciler for LowPowerOperator {
    fn name(&self) -> &str {
        "lowpower"
    }

    fn watched_kinds(&self) -> Vec<Kind> {
        vec![Kind::TeaStoreConfig]
    }

    fn broadcast_targets(&self, event: &BroadcastEvent, cluster: &Cluster) -> Vec<ReconcileRequest> {
        let ours = event.event_type == BroadcastType::OutOfMemory
            && (event.payload.get("deployment") == Some(&self.config.target_deployment)
                || cluster
                    .pod(&event.source_pod)
                    .is_some_and(|p| p.deployment == self.config.target_deployment));
        if ours {
            cluster.store.keys(Kind::TeaStoreConfig)
        } else {
            Vec::new()
        }
    }

    fn reconcile(&mut self, request: &ReconcileRequest, ctx: &mut ReconcileContext<'_>) -> ReconcileResult {
        match self.run(request, ctx) {
            Ok(()) => ReconcileResult::requeue_after(self.config.requeue_after_seconds),
            Err(e) => {
                ctx.note("detail", json!(e.to_string()));
                ReconcileResult::failed(e)
            }
        }
    }

    fn box_clone(&self) -> Box<dyn crate::engine::Reconciler> {
        Box::new(self.clone())
    }
}
