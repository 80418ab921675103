//! In-memory declarative resource store.
//!
//! Objects carry a `spec` (desired state, written by clients and operators)
//! and a `status` (observed state, written by controllers and the simulator).
//! Every write is a compare-and-swap on the per-object `resourceVersion`;
//! committed writes fan out to watch subscribers, optionally through a lossy
//! channel when fault injection is active.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const DEFAULT_NAMESPACE: &str = "default";

/// Resource kinds understood by the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Kind {
    Deployment,
    Pod,
    Service,
    HorizontalPodAutoscaler,
    TeaStoreConfig,
    RecommenderModel,
}

impl Kind {
    pub const ALL: [Kind; 6] = [
        Kind::Deployment,
        Kind::Pod,
        Kind::Service,
        Kind::HorizontalPodAutoscaler,
        Kind::TeaStoreConfig,
        Kind::RecommenderModel,
    ];

    pub fn api_version(self) -> &'static str {
        match self {
            Kind::Deployment => "apps/v1",
            Kind::Pod | Kind::Service => "v1",
            Kind::HorizontalPodAutoscaler => "autoscaling/v2",
            Kind::TeaStoreConfig | Kind::RecommenderModel => "adaptive.io/v1",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Deployment => "Deployment",
            Kind::Pod => "Pod",
            Kind::Service => "Service",
            Kind::HorizontalPodAutoscaler => "HorizontalPodAutoscaler",
            Kind::TeaStoreConfig => "TeaStoreConfig",
            Kind::RecommenderModel => "RecommenderModel",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Kind {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Kind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| StoreError::UnknownKind(s.to_string()))
    }
}

fn default_namespace() -> String {
    DEFAULT_NAMESPACE.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ObjectMeta {
    pub name: String,
    #[serde(default = "default_namespace")]
    pub namespace: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    #[serde(default)]
    pub resource_version: u64,
    #[serde(default)]
    pub generation: u64,
}

impl ObjectMeta {
    pub fn named(name: impl Into<String>) -> Self {
        ObjectMeta {
            name: name.into(),
            namespace: default_namespace(),
            labels: BTreeMap::new(),
            resource_version: 0,
            generation: 0,
        }
    }
}

/// A declarative object: metadata plus kind-specific spec and status records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Resource {
    pub api_version: String,
    pub kind: Kind,
    pub metadata: ObjectMeta,
    #[serde(default = "empty_object")]
    pub spec: Value,
    #[serde(default = "empty_object")]
    pub status: Value,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

impl Resource {
    pub fn new(kind: Kind, name: impl Into<String>, spec: Value) -> Self {
        Resource {
            api_version: kind.api_version().to_string(),
            kind,
            metadata: ObjectMeta::named(name),
            spec,
            status: empty_object(),
        }
    }

    pub fn with_labels(mut self, labels: BTreeMap<String, String>) -> Self {
        self.metadata.labels = labels;
        self
    }

    pub fn with_status(mut self, status: Value) -> Self {
        self.status = status;
        self
    }

    pub fn key(&self) -> ObjectKey {
        ObjectKey {
            kind: self.kind,
            namespace: self.metadata.namespace.clone(),
            name: self.metadata.name.clone(),
        }
    }

    pub fn name(&self) -> &str {
        &self.metadata.name
    }

    pub fn version(&self) -> u64 {
        self.metadata.resource_version
    }

    pub fn spec_as<T: serde::de::DeserializeOwned>(&self) -> Result<T, StoreError> {
        serde_json::from_value(self.spec.clone()).map_err(|e| StoreError::Decode {
            key: self.key().to_string(),
            message: e.to_string(),
        })
    }

    pub fn status_as<T: serde::de::DeserializeOwned + Default>(&self) -> Result<T, StoreError> {
        if self.status.as_object().is_some_and(|m| m.is_empty()) || self.status.is_null() {
            return Ok(T::default());
        }
        serde_json::from_value(self.status.clone()).map_err(|e| StoreError::Decode {
            key: self.key().to_string(),
            message: e.to_string(),
        })
    }

    pub fn matches(&self, selector: &BTreeMap<String, String>) -> bool {
        selector.iter().all(|(k, v)| self.metadata.labels.get(k) == Some(v))
    }
}

/// (kind, namespace, name) identity of a live object.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectKey {
    pub kind: Kind,
    pub namespace: String,
    pub name: String,
}

impl ObjectKey {
    pub fn new(kind: Kind, name: impl Into<String>) -> Self {
        ObjectKey {
            kind,
            namespace: default_namespace(),
            name: name.into(),
        }
    }
}

impl fmt::Display for ObjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.kind, self.namespace, self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WriteOutcome {
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub new_resource_version: Option<u64>,
    pub conflict: bool,
}

impl WriteOutcome {
    fn accepted(version: u64) -> Self {
        WriteOutcome {
            accepted: true,
            new_resource_version: Some(version),
            conflict: false,
        }
    }

    fn conflict() -> Self {
        WriteOutcome {
            accepted: false,
            new_resource_version: None,
            conflict: true,
        }
    }

    /// Turns a conflict into an error so callers can use `?`.
    pub fn committed(self, key: &ObjectKey) -> Result<u64, StoreError> {
        match self.new_resource_version {
            Some(v) if self.accepted => Ok(v),
            _ => Err(StoreError::Conflict(key.to_string())),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum StoreError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0} already exists")]
    AlreadyExists(String),
    #[error("conflict writing {0}: stale resourceVersion")]
    Conflict(String),
    #[error("unknown kind {0:?}")]
    UnknownKind(String),
    #[error("cannot decode {key}: {message}")]
    Decode { key: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventType {
    Added,
    Modified,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChangeNotification {
    pub kind: Kind,
    pub namespace: String,
    pub name: String,
    pub event_type: EventType,
}

/// Which part of an object a committed write touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum WriteKind {
    Create,
    Spec,
    Status,
    Delete,
}

/// One committed write, kept in the journal for tracing.
#[derive(Debug, Clone, PartialEq)]
pub struct WriteRecord {
    pub key: ObjectKey,
    pub write: WriteKind,
    pub resource_version: u64,
    pub generation: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WatchId(usize);

#[derive(Debug, Clone)]
struct Subscriber {
    kind: Option<Kind>,
    pending: VecDeque<ChangeNotification>,
    active: bool,
}

#[derive(Debug, Clone)]
pub struct Store {
    objects: BTreeMap<ObjectKey, Resource>,
    subscribers: Vec<Subscriber>,
    drop_probability: f64,
    drop_rng: ChaCha8Rng,
    writes: u64,
    journal: Vec<WriteRecord>,
}

impl Default for Store {
    fn default() -> Self {
        Store::new()
    }
}

impl Store {
    pub fn new() -> Self {
        Store {
            objects: BTreeMap::new(),
            subscribers: Vec::new(),
            drop_probability: 0.0,
            drop_rng: ChaCha8Rng::seed_from_u64(0),
            writes: 0,
            journal: Vec::new(),
        }
    }

    /// Makes watch delivery lossy: each notification is independently dropped
    /// per subscriber with the given probability, drawn from `seed`.
    pub fn set_watch_drop(&mut self, probability: f64, seed: u64) {
        self.drop_probability = probability.clamp(0.0, 1.0);
        self.drop_rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Total committed writes (create, spec, status, delete).
    pub fn write_count(&self) -> u64 {
        self.writes
    }

    pub fn drain_journal(&mut self) -> Vec<WriteRecord> {
        std::mem::take(&mut self.journal)
    }

    pub fn create(&mut self, mut resource: Resource) -> Result<WriteOutcome, StoreError> {
        let key = resource.key();
        if self.objects.contains_key(&key) {
            return Err(StoreError::AlreadyExists(key.to_string()));
        }
        resource.api_version = resource.kind.api_version().to_string();
        resource.metadata.resource_version = 1;
        resource.metadata.generation = 1;
        self.commit(key.clone(), resource, WriteKind::Create, EventType::Added);
        Ok(WriteOutcome::accepted(1))
    }

    pub fn get(&self, kind: Kind, namespace: &str, name: &str) -> Result<Resource, StoreError> {
        let key = ObjectKey {
            kind,
            namespace: namespace.to_string(),
            name: name.to_string(),
        };
        self.objects
            .get(&key)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(key.to_string()))
    }

    pub fn get_key(&self, key: &ObjectKey) -> Result<Resource, StoreError> {
        self.get(key.kind, &key.namespace, &key.name)
    }

    pub fn contains(&self, key: &ObjectKey) -> bool {
        self.objects.contains_key(key)
    }

    /// All live objects of `kind` in `namespace` whose labels are a superset
    /// of `selector`, sorted by name.
    pub fn list(&self, kind: Kind, namespace: &str, selector: &BTreeMap<String, String>) -> Vec<Resource> {
        // keys are ordered (kind, namespace, name), so a range scan is name-sorted
        self.objects
            .range(
                ObjectKey {
                    kind,
                    namespace: namespace.to_string(),
                    name: String::new(),
                }..,
            )
            .take_while(|(k, _)| k.kind == kind && k.namespace == namespace)
            .filter(|(_, r)| r.matches(selector))
            .map(|(_, r)| r.clone())
            .collect()
    }

    pub fn keys(&self, kind: Kind) -> Vec<ObjectKey> {
        self.objects.keys().filter(|k| k.kind == kind).cloned().collect()
    }

    pub fn update_spec(&mut self, resource: &Resource, expected_version: u64) -> Result<WriteOutcome, StoreError> {
        self.update(resource, expected_version, WriteKind::Spec)
    }

    pub fn update_status(&mut self, resource: &Resource, expected_version: u64) -> Result<WriteOutcome, StoreError> {
        self.update(resource, expected_version, WriteKind::Status)
    }

    fn update(
        &mut self,
        resource: &Resource,
        expected_version: u64,
        write: WriteKind,
    ) -> Result<WriteOutcome, StoreError> {
        let key = resource.key();
        let stored = self
            .objects
            .get(&key)
            .ok_or_else(|| StoreError::NotFound(key.to_string()))?;
        if stored.metadata.resource_version != expected_version {
            return Ok(WriteOutcome::conflict());
        }
        let mut next = stored.clone();
        next.metadata.resource_version += 1;
        match write {
            WriteKind::Spec => {
                next.spec = resource.spec.clone();
                next.metadata.labels = resource.metadata.labels.clone();
                next.metadata.generation += 1;
            }
            WriteKind::Status => next.status = resource.status.clone(),
            WriteKind::Create | WriteKind::Delete => unreachable!("not an update"),
        }
        let version = next.metadata.resource_version;
        self.commit(key, next, write, EventType::Modified);
        Ok(WriteOutcome::accepted(version))
    }

    /// Immediate deletion; there are no finalizers.
    pub fn delete(&mut self, kind: Kind, namespace: &str, name: &str) -> Result<(), StoreError> {
        let key = ObjectKey {
            kind,
            namespace: namespace.to_string(),
            name: name.to_string(),
        };
        let removed = self
            .objects
            .remove(&key)
            .ok_or_else(|| StoreError::NotFound(key.to_string()))?;
        self.writes += 1;
        self.journal.push(WriteRecord {
            key: key.clone(),
            write: WriteKind::Delete,
            resource_version: removed.metadata.resource_version,
            generation: removed.metadata.generation,
        });
        self.notify(&key, EventType::Deleted);
        Ok(())
    }

    fn commit(&mut self, key: ObjectKey, resource: Resource, write: WriteKind, event: EventType) {
        self.writes += 1;
        self.journal.push(WriteRecord {
            key: key.clone(),
            write,
            resource_version: resource.metadata.resource_version,
            generation: resource.metadata.generation,
        });
        self.objects.insert(key.clone(), resource);
        self.notify(&key, event);
    }

    fn notify(&mut self, key: &ObjectKey, event_type: EventType) {
        for sub in self.subscribers.iter_mut() {
            if !sub.active || sub.kind.is_some_and(|k| k != key.kind) {
                continue;
            }
            let dropped = if self.drop_probability >= 1.0 {
                true
            } else if self.drop_probability <= 0.0 {
                false
            } else {
                self.drop_rng.gen_bool(self.drop_probability)
            };
            if !dropped {
                sub.pending.push_back(ChangeNotification {
                    kind: key.kind,
                    namespace: key.namespace.clone(),
                    name: key.name.clone(),
                    event_type,
                });
            }
        }
    }

    /// Subscribes to committed writes of `kind` (all kinds when `None`).
    pub fn watch(&mut self, kind: Option<Kind>) -> WatchId {
        self.subscribers.push(Subscriber {
            kind,
            pending: VecDeque::new(),
            active: true,
        });
        WatchId(self.subscribers.len() - 1)
    }

    pub fn unwatch(&mut self, id: WatchId) {
        if let Some(sub) = self.subscribers.get_mut(id.0) {
            sub.active = false;
            sub.pending.clear();
        }
    }

    /// Takes every notification delivered to `id` since the last poll.
    pub fn poll(&mut self, id: WatchId) -> Vec<ChangeNotification> {
        self.subscribers
            .get_mut(id.0)
            .map(|s| s.pending.drain(..).collect())
            .unwrap_or_default()
    }

    pub fn objects(&self) -> impl Iterator<Item = &Resource> {
        self.objects.values()
    }
}
