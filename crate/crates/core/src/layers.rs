//! Context-oriented behavioral variation for simulated services.
//!
//! A request's active layers come from two places: layer identifiers carried
//! in its headers (propagated by an upstream service) and this service's own
//! interpretation rules applied to customization properties. Dispatch runs the
//! most recently activated layer that overrides an operation; each variant can
//! `proceed` to the next-lower one, ending at the base variant.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::request::SimRequest;

pub const PROP_HEADER_PREFIX: &str = "x-ctx-prop-";
pub const LAYER_HEADER: &str = "x-ctx-layer";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(String);

impl LayerId {
    pub fn new(id: impl Into<String>) -> Self {
        LayerId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ordered set of layers; position is activation order, last is highest precedence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerSet(Vec<LayerId>);

impl LayerSet {
    pub fn new() -> Self {
        LayerSet::default()
    }

    /// Appends `layer` unless it is already active.
    pub fn activate(&mut self, layer: LayerId) {
        if !self.0.contains(&layer) {
            self.0.push(layer);
        }
    }

    pub fn contains(&self, layer: &str) -> bool {
        self.0.iter().any(|l| l.as_str() == layer)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &LayerId> {
        self.0.iter()
    }

    /// Header encoding: comma-joined in activation order.
    pub fn to_header(&self) -> String {
        self.0.iter().map(LayerId::as_str).collect::<Vec<_>>().join(",")
    }

    pub fn from_header(value: &str) -> LayerSet {
        let mut set = LayerSet::new();
        for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            set.activate(LayerId::new(part));
        }
        set
    }
}

impl FromIterator<LayerId> for LayerSet {
    fn from_iter<I: IntoIterator<Item = LayerId>>(iter: I) -> Self {
        let mut set = LayerSet::new();
        for l in iter {
            set.activate(l);
        }
        set
    }
}

impl fmt::Display for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.to_header())
    }
}

/// Activation state of one request inside one service. Never mutated after
/// construction; downstream calls derive new requests via [`propagate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RequestContext {
    pub request_id: String,
    pub active_layers: LayerSet,
    pub customization_props: BTreeMap<String, String>,
    pub origin_connector: Option<String>,
}

impl RequestContext {
    pub fn base(request_id: impl Into<String>) -> Self {
        RequestContext {
            request_id: request_id.into(),
            active_layers: LayerSet::new(),
            customization_props: BTreeMap::new(),
            origin_connector: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayerError {
    #[error("operation {0:?} has no base variant")]
    UnknownOperation(String),
    #[error("interpretation rule activates undeclared layer {0:?}")]
    UndeclaredLayer(String),
}

/// Client-side interceptor: copies the connector's customization properties
/// into request headers. The input request is left untouched.
pub fn client_intercept(props: &BTreeMap<String, String>, request: &SimRequest) -> SimRequest {
    let mut out = request.clone();
    for (k, v) in props {
        out.headers.insert(format!("{PROP_HEADER_PREFIX}{k}"), v.clone());
    }
    out
}

fn header_props(request: &SimRequest) -> BTreeMap<String, String> {
    request
        .headers
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix(PROP_HEADER_PREFIX)
                .map(|key| (key.to_string(), v.clone()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterpretationRule {
    pub prop: String,
    pub value: String,
    pub layer: LayerId,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PropagationMode {
    /// Forward both customization properties and layer identifiers.
    #[default]
    Forward,
    /// Forward properties only; every hop re-interprets them.
    PropsOnly,
}

/// Server-side interceptor of one service.
#[derive(Debug, Clone, Default)]
pub struct ServerInterceptor {
    known: BTreeSet<LayerId>,
    rules: Vec<InterpretationRule>,
}

impl ServerInterceptor {
    pub fn new(known: impl IntoIterator<Item = LayerId>, rules: Vec<InterpretationRule>) -> Result<Self, LayerError> {
        let known: BTreeSet<LayerId> = known.into_iter().collect();
        if let Some(bad) = rules.iter().find(|r| !known.contains(&r.layer)) {
            return Err(LayerError::UndeclaredLayer(bad.layer.to_string()));
        }
        Ok(ServerInterceptor { known, rules })
    }

    /// Builds the request context. Header layers this service does not know are
    /// skipped and reported as warnings.
    pub fn intercept(&self, request: &SimRequest) -> (RequestContext, Vec<String>) {
        let mut warnings = Vec::new();
        let mut layers = LayerSet::new();
        if let Some(raw) = request.headers.get(LAYER_HEADER) {
            for id in LayerSet::from_header(raw).iter() {
                if self.known.contains(id) {
                    layers.activate(id.clone());
                } else {
                    warnings.push(format!("unknown layer {id} in request {}", request.id));
                }
            }
        }
        let props = header_props(request);
        for rule in &self.rules {
            if props.get(&rule.prop) == Some(&rule.value) {
                layers.activate(rule.layer.clone());
            }
        }
        let ctx = RequestContext {
            request_id: request.id.clone(),
            active_layers: layers,
            customization_props: props,
            origin_connector: request.origin_connector.clone(),
        };
        (ctx, warnings)
    }
}

/// Copies the context's properties (and, in forward mode, its layer ids)
/// into the headers of a downstream request.
pub fn propagate(ctx: &RequestContext, downstream: &SimRequest, mode: PropagationMode) -> SimRequest {
    let mut out = client_intercept(&ctx.customization_props, downstream);
    if mode == PropagationMode::Forward && !ctx.active_layers.is_empty() {
        out.headers
            .insert(LAYER_HEADER.to_string(), ctx.active_layers.to_header());
    }
    out
}

/// What a variant sees when invoked.
pub struct Invocation<'a> {
    pub request_id: &'a str,
    pub operation: &'a str,
    pub layer: Option<&'a LayerId>,
    proceed: &'a dyn Fn(&Value) -> Value,
}

impl Invocation<'_> {
    /// Runs the next-lower variant; the base variant's proceed echoes its input.
    pub fn proceed(&self, input: &Value) -> Value {
        (self.proceed)(input)
    }
}

pub type Variant = Arc<dyn Fn(&Invocation<'_>, &Value) -> Value + Send + Sync>;

/// One variant execution, tagged with the request it ran for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Execution {
    pub request_id: String,
    pub operation: String,
    pub variant: String,
}

pub const BASE_VARIANT: &str = "base";

#[derive(Clone, Default)]
pub struct VariantRegistry {
    base: BTreeMap<String, Variant>,
    overrides: BTreeMap<(String, LayerId), Variant>,
}

impl fmt::Debug for VariantRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VariantRegistry")
            .field("base", &self.base.keys().collect::<Vec<_>>())
            .field("overrides", &self.overrides.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl VariantRegistry {
    pub fn new() -> Self {
        VariantRegistry::default()
    }

    pub fn register_base(&mut self, operation: impl Into<String>, variant: Variant) {
        self.base.insert(operation.into(), variant);
    }

    pub fn register_layer(&mut self, operation: impl Into<String>, layer: LayerId, variant: Variant) {
        self.overrides.insert((operation.into(), layer), variant);
    }

    /// Base variant that reports `{operation, variant: "base", chain: ["base"], input}`.
    pub fn tagging_base(operation: &str) -> Variant {
        let op = operation.to_string();
        Arc::new(
            move |_inv, input| json!({"operation": op, "variant": BASE_VARIANT, "chain": [BASE_VARIANT], "input": input}),
        )
    }

    /// Layer variant that proceeds, then stamps its id as the effective variant
    /// and appends it to the call chain.
    pub fn tagging_layer(layer: &LayerId) -> Variant {
        let id = layer.to_string();
        Arc::new(move |inv, input| {
            let mut out = inv.proceed(input);
            if let Some(obj) = out.as_object_mut() {
                obj.insert("variant".into(), json!(id));
                if let Some(chain) = obj.get_mut("chain").and_then(Value::as_array_mut) {
                    chain.push(json!(id));
                }
            }
            out
        })
    }

    pub fn has_operation(&self, operation: &str) -> bool {
        self.base.contains_key(operation)
    }

    pub fn dispatch(
        &self,
        ctx: &RequestContext,
        operation: &str,
        input: &Value,
        audit: &mut Vec<Execution>,
    ) -> Result<Value, LayerError> {
        self.dispatch_with(&ctx.active_layers, &ctx.request_id, operation, input, audit)
    }

    pub fn dispatch_with(
        &self,
        layers: &LayerSet,
        request_id: &str,
        operation: &str,
        input: &Value,
        audit: &mut Vec<Execution>,
    ) -> Result<Value, LayerError> {
        let base = self
            .base
            .get(operation)
            .ok_or_else(|| LayerError::UnknownOperation(operation.to_string()))?;
        let mut chain: Vec<(Option<&LayerId>, &Variant)> = vec![(None, base)];
        for layer in layers.iter() {
            if let Some(v) = self.overrides.get(&(operation.to_string(), layer.clone())) {
                chain.push((Some(layer), v));
            }
        }
        let log = RefCell::new(Vec::new());
        let out = run_chain(&chain, chain.len() - 1, request_id, operation, input, &log);
        audit.extend(log.into_inner());
        Ok(out)
    }

    /// Invokes a callback with the layers captured at registration time,
    /// whatever context the callback is delivered from.
    pub fn dispatch_callback(
        &self,
        listener: &CapturedListener,
        operation: &str,
        input: &Value,
        audit: &mut Vec<Execution>,
    ) -> Result<Value, LayerError> {
        self.dispatch_with(
            &listener.captured_layers,
            &listener.listener_id,
            operation,
            input,
            audit,
        )
    }
}

fn run_chain(
    chain: &[(Option<&LayerId>, &Variant)],
    idx: usize,
    request_id: &str,
    operation: &str,
    input: &Value,
    log: &RefCell<Vec<Execution>>,
) -> Value {
    let (layer, variant) = chain[idx];
    log.borrow_mut().push(Execution {
        request_id: request_id.to_string(),
        operation: operation.to_string(),
        variant: layer.map_or(BASE_VARIANT.to_string(), LayerId::to_string),
    });
    let proceed = |v: &Value| -> Value {
        if idx == 0 {
            v.clone()
        } else {
            run_chain(chain, idx - 1, request_id, operation, v, log)
        }
    };
    let inv = Invocation {
        request_id,
        operation,
        layer,
        proceed: &proceed,
    };
    variant(&inv, input)
}

/// A callback target pinned to the layers active when it was registered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CapturedListener {
    pub listener_id: String,
    pub captured_layers: LayerSet,
}

pub fn capture_listener(listener_id: impl Into<String>, ctx: &RequestContext) -> CapturedListener {
    CapturedListener {
        listener_id: listener_id.into(),
        captured_layers: ctx.active_layers.clone(),
    }
}
