use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Color, OperatorError, RecommenderModelSpec, RecommenderModelStatus, RolloutPhase};
use crate::engine::{ReconcileContext, ReconcileRequest, ReconcileResult, Reconciler};
use crate::sim::{DeploymentSpec, PodPhase, ServiceSpec};
use crate::store::{Kind, Resource, StoreError};

pub const COLOR_LABEL: &str = "color";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct BlueGreenConfig {
    pub service: String,
    /// Color deployments are named `<prefix>-blue` and `<prefix>-green`.
    pub deployment_prefix: String,
    /// Static recommender used when `instantSwitch` is requested.
    #[serde(default)]
    pub fallback_service: Option<String>,
    #[serde(default = "default_transition_requeue")]
    pub transition_requeue_seconds: u64,
    #[serde(default = "default_stable_requeue")]
    pub stable_requeue_seconds: u64,
}

fn default_transition_requeue() -> u64 {
    10
}
fn default_stable_requeue() -> u64 {
    60
}

impl BlueGreenConfig {
    pub fn new(service: impl Into<String>, deployment_prefix: impl Into<String>) -> Self {
        BlueGreenConfig {
            service: service.into(),
            deployment_prefix: deployment_prefix.into(),
            fallback_service: None,
            transition_requeue_seconds: default_transition_requeue(),
            stable_requeue_seconds: default_stable_requeue(),
        }
    }

    pub fn deployment(&self, color: Color) -> String {
        format!("{}-{}", self.deployment_prefix, color.as_str())
    }
}

/// Dark-launches a new model flavor next to the serving one, switches the
/// service once the shadow has trained on mirrored traffic, and retires the
/// old color after its in-flight requests drain.
#[derive(Debug, Clone)]
pub struct BlueGreenOperator {
    config: BlueGreenConfig,
}

fn with_color(selector: &BTreeMap<String, String>, color: Color) -> BTreeMap<String, String> {
    let mut s = selector.clone();
    s.insert(COLOR_LABEL.to_string(), color.as_str().to_string());
    s
}

impl BlueGreenOperator {
    pub fn new(config: BlueGreenConfig) -> Self {
        BlueGreenOperator { config }
    }

    pub fn config(&self) -> &BlueGreenConfig {
        &self.config
    }

    fn write_status(
        ctx: &mut ReconcileContext<'_>,
        cr: &Resource,
        status: &RecommenderModelStatus,
    ) -> Result<(), OperatorError> {
        let value = serde_json::to_value(status).expect("status serializes");
        if cr.status == value {
            return Ok(());
        }
        let mut next = cr.clone();
        next.status = value;
        ctx.cluster
            .store
            .update_status(&next, cr.version())?
            .committed(&cr.key())?;
        Ok(())
    }

    fn write_service(ctx: &mut ReconcileContext<'_>, svc: &Resource, spec: &ServiceSpec) -> Result<(), OperatorError> {
        let value = serde_json::to_value(spec).expect("spec serializes");
        if svc.spec == value {
            return Ok(());
        }
        let mut next = svc.clone();
        next.spec = value;
        ctx.cluster
            .store
            .update_spec(&next, svc.version())?
            .committed(&svc.key())?;
        Ok(())
    }

    fn initial_status(
        &self,
        ctx: &ReconcileContext<'_>,
        ns: &str,
        svc: &ServiceSpec,
    ) -> Result<RecommenderModelStatus, OperatorError> {
        let color = match svc.selector.get(COLOR_LABEL).map(String::as_str) {
            Some("green") => Color::Green,
            _ => Color::Blue,
        };
        let name = self.config.deployment(color);
        let dep = ctx
            .cluster
            .store
            .get(Kind::Deployment, ns, &name)
            .map_err(|_| OperatorError::Missing(format!("deployment {name} not found")))?;
        Ok(RecommenderModelStatus {
            active_color: color,
            active_flavor: dep.spec_as::<DeploymentSpec>()?.template.flavor,
            phase: RolloutPhase::Stable,
            training_progress: 0.0,
            drained_at: None,
        })
    }

    /// Retires the old color one tick after it was first seen idle, so the
    /// deletion is strictly later than its last completed request.
    fn drain(
        &self,
        ctx: &mut ReconcileContext<'_>,
        ns: &str,
        spec: &RecommenderModelSpec,
        status: &mut RecommenderModelStatus,
    ) -> Result<(), OperatorError> {
        let old_dep = self.config.deployment(status.active_color);
        let busy: u32 = ctx
            .cluster
            .pods()
            .filter(|p| p.deployment == old_dep)
            .map(|p| p.in_flight)
            .sum();
        ctx.note("oldInFlight", busy);
        if busy > 0 {
            status.drained_at = None;
            return Ok(());
        }
        match status.drained_at {
            None => status.drained_at = Some(ctx.now),
            Some(t) if ctx.now > t => {
                match ctx.cluster.store.delete(Kind::Deployment, ns, &old_dep) {
                    Ok(()) | Err(StoreError::NotFound(_)) => {}
                    Err(e) => return Err(e.into()),
                }
                status.active_color = status.active_color.other();
                status.active_flavor = spec.model_flavor.clone();
                status.phase = RolloutPhase::Stable;
                status.training_progress = 0.0;
                status.drained_at = None;
                ctx.note("retired", old_dep);
            }
            Some(_) => {}
        }
        Ok(())
    }

    fn run(&self, request: &ReconcileRequest, ctx: &mut ReconcileContext<'_>) -> Result<RolloutPhase, OperatorError> {
        let cr = match ctx.cluster.store.get_key(request) {
            Ok(r) => r,
            Err(StoreError::NotFound(_)) => return Ok(RolloutPhase::Stable),
            Err(e) => return Err(e.into()),
        };
        let ns = request.namespace.clone();
        let svc = ctx
            .cluster
            .store
            .get(Kind::Service, &ns, &self.config.service)
            .map_err(|_| OperatorError::Missing(format!("service {} not found", self.config.service)))?;
        let mut svc_spec: ServiceSpec = svc.spec_as()?;
        let spec: RecommenderModelSpec = cr.spec_as()?;
        let mut status: RecommenderModelStatus = if cr.status.get("activeFlavor").is_some() {
            cr.status_as()?
        } else {
            self.initial_status(ctx, &ns, &svc_spec)?
        };
        let old = status.active_color;
        let new = old.other();

        match status.phase {
            RolloutPhase::Stable if spec.model_flavor != status.active_flavor => {
                let active = ctx
                    .cluster
                    .store
                    .get(Kind::Deployment, &ns, &self.config.deployment(old))
                    .map_err(|_| {
                        OperatorError::Missing(format!("deployment {} not found", self.config.deployment(old)))
                    })?;
                let mut dep_spec: DeploymentSpec = active.spec_as()?;
                dep_spec.template.flavor = spec.model_flavor.clone();
                dep_spec.labels = with_color(&dep_spec.labels, new);
                let shadow = Resource::new(
                    Kind::Deployment,
                    self.config.deployment(new),
                    serde_json::to_value(&dep_spec).expect("spec serializes"),
                )
                .with_labels(dep_spec.labels.clone());
                match ctx.cluster.store.create(shadow) {
                    Ok(_) | Err(StoreError::AlreadyExists(_)) => {}
                    Err(e) => return Err(e.into()),
                }
                // pin clients to the serving color before the shadow comes up
                svc_spec.selector = with_color(&svc_spec.selector, old);
                svc_spec.mirror_selector = Some(with_color(&svc_spec.selector, new));
                if spec.instant_switch {
                    if let Some(f) = &self.config.fallback_service {
                        svc_spec.fallback = Some(f.clone());
                    }
                    if svc_spec.fallback.is_none() {
                        return Err(OperatorError::Missing("instantSwitch needs a fallback service".into()));
                    }
                    svc_spec.fallback_active = true;
                }
                Self::write_service(ctx, &svc, &svc_spec)?;
                status.phase = RolloutPhase::Training;
                status.training_progress = 0.0;
                ctx.note("launched", self.config.deployment(new));
            }
            RolloutPhase::Stable => {}
            RolloutPhase::Training | RolloutPhase::Switching => {
                let selector = with_color(&svc_spec.selector, new);
                let shadow: Vec<_> = ctx
                    .cluster
                    .pods()
                    .filter(|p| {
                        p.phase == PodPhase::Running && selector.iter().all(|(k, v)| p.labels.get(k) == Some(v))
                    })
                    .map(|p| p.training_progress)
                    .collect();
                let progress = if shadow.is_empty() {
                    0.0
                } else {
                    shadow.iter().copied().fold(f64::INFINITY, f64::min).min(1.0)
                };
                status.training_progress = progress;
                ctx.note("trainingProgress", progress);
                if progress >= 1.0 {
                    svc_spec.selector = selector;
                    svc_spec.mirror_selector = None;
                    svc_spec.fallback_active = false;
                    Self::write_service(ctx, &svc, &svc_spec)?;
                    status.phase = RolloutPhase::Draining;
                    ctx.note("switched", new.as_str());
                }
            }
            RolloutPhase::Draining => {}
        }
        if status.phase == RolloutPhase::Draining {
            self.drain(ctx, &ns, &spec, &mut status)?;
        }
        Self::write_status(ctx, &cr, &status)?;
        Ok(status.phase)
    }
}

impl Reconciler for BlueGreenOperator {
    fn name(&self) -> &str {
        "bluegreen"
    }

    fn watched_kinds(&self) -> Vec<Kind> {
        vec![Kind::RecommenderModel]
    }

    fn reconcile(&mut self, request: &ReconcileRequest, ctx: &mut ReconcileContext<'_>) -> ReconcileResult {
        match self.run(request, ctx) {
            Ok(RolloutPhase::Stable) => ReconcileResult::requeue_after(self.config.stable_requeue_seconds),
            Ok(_) => ReconcileResult::requeue_after(self.config.transition_requeue_seconds),
            Err(e) => {
                ctx.note("detail", json!(e.to_string()));
                ReconcileResult::failed(e)
            }
        }
    }

    fn box_clone(&self) -> Box<dyn Reconciler> {
        Box::new(self.clone())
    }
}
