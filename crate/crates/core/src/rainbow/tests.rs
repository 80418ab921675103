use std::collections::BTreeMap;

use proptest::prelude::*;
use serde_json::json;

use super::*;
use crate::request::SimRequest;
use crate::sim::{
    ClientWorkload, ConnectorSpec, DeploymentSpec, Piecewise, PodTemplate, ServiceSpec, SimParams, WorkloadProfile,
};
use crate::store::Resource;

const S: EpochSeconds = 5_000;

fn labels(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

struct World {
    cluster: Cluster,
    now: EpochSeconds,
}

impl World {
    fn new(replicas: u32, latency: f64, baseline_memory: u64) -> Self {
        let mut c = Cluster::new(SimParams::default(), S, 4);
        c.add_profile(
            "webui",
            WorkloadProfile {
                baseline_memory_bytes: baseline_memory,
                memory_growth_bytes_per_sec: Piecewise::Constant(0.0),
                latency_ms: Piecewise::Constant(latency),
                capacity_rps: 10.0,
                restart_on_oom: true,
            },
        );
        let l = labels(&[("app", "webui")]);
        let spec = DeploymentSpec {
            replicas,
            template: PodTemplate {
                image: "webui:1".into(),
                flavor: "default".into(),
                memory_limit_bytes: 1_000,
                profile: None,
            },
            labels: l.clone(),
        };
        c.bootstrap_deployment(
            Resource::new(Kind::Deployment, "webui", serde_json::to_value(spec).unwrap()).with_labels(l.clone()),
            S,
        )
        .unwrap();
        let svc = ServiceSpec {
            selector: l,
            ..ServiceSpec::default()
        };
        c.store
            .create(Resource::new(
                Kind::Service,
                "webui",
                serde_json::to_value(svc).unwrap(),
            ))
            .unwrap();
        c.store
            .create(Resource::new(
                Kind::TeaStoreConfig,
                "teastore-config",
                json!({"lowPowerAdaptation": false, "timeInterval": 300}),
            ))
            .unwrap();
        World { cluster: c, now: S }
    }

    fn client(&mut self, id: &str, rtt: f64) {
        self.cluster.add_connector(ConnectorSpec {
            id: format!("conn-{id}"),
            client: id.into(),
            service: "webui".into(),
            round_trip_latency_ms: Piecewise::Constant(rtt),
            properties: BTreeMap::new(),
        });
        self.cluster.add_workload(ClientWorkload {
            client: id.into(),
            service: "webui".into(),
            rate_per_second: Piecewise::Constant(2.0),
            connector: Some(format!("conn-{id}")),
        });
    }

    fn advance(&mut self, seconds: i64) {
        for _ in 0..seconds {
            self.now += 1;
            self.cluster.step(self.now).unwrap();
        }
    }

    fn replicas(&self) -> u32 {
        self.cluster
            .store
            .get(Kind::Deployment, "default", "webui")
            .unwrap()
            .spec_as::<DeploymentSpec>()
            .unwrap()
            .replicas
    }

    fn low_power(&self) -> bool {
        self.cluster
            .store
            .get(Kind::TeaStoreConfig, "default", "teastore-config")
            .unwrap()
            .spec["lowPowerAdaptation"]
            == json!(true)
    }
}

fn listing_one(max_replicas: u32, memory_threshold: f64) -> RuleFile {
    serde_json::from_value(json!({
        "bindings": {
            "serverGroups": [{"id": "sg", "deployment": "webui", "maxReplicas": max_replicas, "config": "teastore-config"}],
            "components": [{"id": "c1", "client": "c1", "serverGroup": "sg"}]
        },
        "indications": [{"symbol": "highLatency", "property": "responseTime", "comparator": ">", "threshold": 100.0}],
        "invariants": [{"name": "maxResponseTime", "property": "responseTime", "comparator": ">", "threshold": 100.0,
                        "strategy": "responseTimeStrategy"}],
        "strategies": [{"name": "responseTimeStrategy", "tactics": [
            {"guard": {"target": "serverGroup", "property": "replicas", "comparator": "<", "ref": "maxReplicas"},
             "effector": {"action": "addServer"}},
            {"guard": {"target": "serverGroup", "property": "usedMemory", "comparator": ">", "threshold": memory_threshold},
             "effector": {"action": "changeParam", "key": "power_mode", "value": "low"}}
        ]}]
    }))
    .unwrap()
}

fn listing_four() -> RuleFile {
    serde_json::from_value(json!({
        "bindings": {
            "connectors": [{"id": "conn-fast"}, {"id": "conn-slow"}],
            "components": [
                {"id": "fast", "client": "fast", "connector": "conn-fast"},
                {"id": "slow", "client": "slow", "connector": "conn-slow"}
            ]
        },
        "invariants": [{"property": "responseTime", "comparator": ">", "threshold": 300.0, "strategy": "contextSensitiveStrategy"}],
        "strategies": [{"name": "contextSensitiveStrategy", "tactics": [
            {"guard": {"target": "connector", "property": "roundTripLatency", "comparator": ">", "threshold": 250.0},
             "effector": {"action": "setProperty", "key": "power_mode", "value": "low"}}
        ]}]
    }))
    .unwrap()
}

#[test]
fn rule_files_parse_and_check() {
    assert!(listing_one(8, 0.8).check().is_empty());
    assert!(listing_four().check().is_empty());
    let mut bad = listing_one(8, 0.8);
    bad.invariants[0].strategy = "nope".into();
    bad.bindings.components[0].server_group = Some("ghost".into());
    assert_eq!(bad.check().len(), 2);
}

#[test]
fn slow_pod_raises_an_indication() {
    let mut w = World::new(1, 120.0, 100);
    for i in 0..3 {
        w.cluster
            .route_request("webui", &SimRequest::new(format!("r{i}"), "x"), S)
            .unwrap();
    }
    let mut rules = listing_one(8, 0.8);
    rules.bindings.components = vec![ComponentBinding {
        id: "pod".into(),
        pod: Some("webui-0".into()),
        client: None,
        connector: None,
        server_group: Some("sg".into()),
    }];
    let mut mape = Mape::new(rules);
    let ind = mape.sync_model(&w.cluster, S);
    assert_eq!(
        ind,
        vec![IndicationEvent {
            symbol: "highLatency".into(),
            subject_id: "pod".into(),
            at_time: S,
            value: 120.0
        }]
    );
}

#[test]
fn dangling_binding_is_stale_and_silent() {
    let w = World::new(1, 500.0, 100);
    let mut rules = listing_one(8, 0.8);
    rules.bindings.components[0] = ComponentBinding {
        id: "ghost".into(),
        pod: Some("webui-99".into()),
        client: None,
        connector: None,
        server_group: Some("sg".into()),
    };
    let mut mape = Mape::new(rules);
    assert!(mape.sync_model(&w.cluster, S).is_empty());
    assert!(mape.model().components["ghost"].stale);
    assert!(mape.evaluate_invariants().is_empty());
}

#[test]
fn server_group_mirrors_deployment_replicas() {
    let mut w = World::new(3, 150.0, 100);
    w.client("c1", 0.0);
    let mut mape = Mape::new(listing_one(8, 0.8));
    for _ in 0..8 {
        w.advance(10);
        mape.tick(&mut w.cluster, w.now);
        assert_eq!(mape.model().server_groups["sg"].replicas, w.replicas());
    }
}

#[test]
fn no_violation_below_threshold() {
    let mut w = World::new(3, 80.0, 100);
    w.client("c1", 0.0);
    w.advance(5);
    let mut mape = Mape::new(listing_one(8, 0.8));
    mape.sync_model(&w.cluster, w.now);
    assert!(mape.evaluate_invariants().is_empty());
}

#[test]
fn cooldown_halves_a_persistent_violation() {
    let mut w = World::new(3, 150.0, 100);
    w.client("c1", 0.0);
    w.advance(5);
    let mut mape = Mape::new(listing_one(8, 0.8));
    let mut fired = 0;
    for _ in 0..3 {
        mape.sync_model(&w.cluster, w.now);
        fired += mape.evaluate_invariants().len();
        mape.tick += 1;
    }
    assert_eq!(fired, 2);
}

#[test]
fn add_server_below_max() {
    let mut w = World::new(3, 150.0, 100);
    w.client("c1", 0.0);
    w.advance(5);
    let mut mape = Mape::new(listing_one(8, 0.8));
    let reports = mape.tick(&mut w.cluster, w.now);
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].effector_action.as_deref(), Some("addServer()"));
    assert!(reports[0].success);
    assert_eq!(reports[0].planning_writes, 0);
    assert_eq!(w.replicas(), 4);
}

#[test]
fn change_param_at_max_with_memory_pressure() {
    let mut w = World::new(8, 150.0, 900);
    w.client("c1", 0.0);
    w.advance(5);
    let mut mape = Mape::new(listing_one(8, 0.8));
    let reports = mape.tick(&mut w.cluster, w.now);
    assert_eq!(
        reports[0].effector_action.as_deref(),
        Some(r#"changeParam("power_mode", "low")"#)
    );
    assert!(w.low_power());
    // the parameter is in place; a later violation finds nothing left to do
    w.advance(30);
    mape.tick += 5;
    let again = mape.tick(&mut w.cluster, w.now);
    assert_eq!(again[0].selected_strategy, None);
}

#[test]
fn nothing_applicable_at_max_without_memory_pressure() {
    let mut w = World::new(8, 150.0, 500);
    w.client("c1", 0.0);
    w.advance(5);
    let mut mape = Mape::new(listing_one(8, 0.8));
    let reports = mape.tick(&mut w.cluster, w.now);
    assert_eq!(reports[0].selected_strategy, None);
    assert!(!reports[0].success);
    assert!(!w.low_power());
    assert_eq!(w.replicas(), 8);
}

#[test]
fn slow_connector_alone_gets_the_property() {
    let mut w = World::new(2, 200.0, 100);
    w.client("fast", 20.0);
    w.client("slow", 400.0);
    w.advance(5);
    let mut mape = Mape::new(listing_four());
    let reports = mape.tick(&mut w.cluster, w.now);
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].target_id.as_deref(), Some("conn-slow"));
    assert_eq!(reports[0].planning_writes, 0);
    assert_eq!(
        w.cluster.connector("conn-slow").unwrap().properties["power_mode"],
        "low"
    );
    assert!(w.cluster.connector("conn-fast").unwrap().properties.is_empty());
}

#[test]
fn pattern_route_drives_a_strategy() {
    let mut rules = listing_one(8, 0.8);
    rules.invariants.clear();
    rules.patterns = vec![SequencePattern {
        name: "persistentContention".into(),
        symbols: vec![SymbolSpec::any("highLatency"); 3],
        per_subject: true,
        within_seconds: 120,
        strategy: Some("responseTimeStrategy".into()),
    }];
    assert!(rules.check().is_empty());
    let mut w = World::new(3, 150.0, 100);
    w.client("c1", 0.0);
    let mut mape = Mape::new(rules);
    let mut actions = Vec::new();
    for _ in 0..6 {
        w.advance(10);
        actions.extend(mape.tick(&mut w.cluster, w.now));
    }
    // six indications, two completed matches of three
    assert_eq!(actions.len(), 2);
    assert_eq!(w.replicas(), 5);
    let kinds: Vec<String> = mape.drain_events().into_iter().map(|e| e.kind).collect();
    assert_eq!(kinds.iter().filter(|k| *k == "pattern_match").count(), 2);
}

fn scaled_model(values: &[u32], scale: f64) -> ArchModel {
    let mut m = ArchModel::default();
    for (i, v) in values.iter().enumerate() {
        let id = format!("c{i}");
        m.components.insert(
            id.clone(),
            ArchComponent {
                id,
                response_time: *v as f64 * scale,
                used_memory: 0.0,
                bound_pod: None,
                bound_client: None,
                connector: None,
                server_group: None,
                stale: false,
            },
        );
    }
    m
}

fn fired(values: &[u32], max: u32, scale: f64) -> Vec<String> {
    let mut rules = listing_one(8, 0.8);
    rules.bindings = Bindings::default();
    rules.invariants[0].threshold = max as f64 * scale;
    let mut mape = Mape::new(rules);
    *mape.model_mut() = scaled_model(values, scale);
    mape.evaluate_invariants().into_iter().map(|e| e.subject_id).collect()
}

proptest! {
    #[test]
    fn fired_invariants_are_scale_invariant(
        values in prop::collection::vec(0u32..500, 1..12),
        max in 1u32..500,
        scale in prop::sample::select(vec![0.25, 0.5, 2.0, 3.0, 10.0, 1000.0]),
    ) {
        prop_assert_eq!(fired(&values, max, 1.0), fired(&values, max, scale));
    }
}
