use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use dsm_broker::{Broker, BrokerConfig, Delivery, LocalOptions, QoS};
use dsm_cloud::{BatchTransport, CloudError, IngestAck};
use dsm_core::{encode_message, MeasurementMessage, Payload, ProcessingMode, Unit};
use dsm_quality::{predict_risk, save_model, sigmoid, QualityModel};
use dsm_wires::{
    load_graph, BuildContext, Control, ControlReply, Pipeline, Registry, WireRecord, WiresError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const T0: i64 = 1_700_000_000_000_000;

fn features_msg(node: &str, ch: &str, seq: u64, t: i64, f: &[(&str, f64)]) -> MeasurementMessage {
    MeasurementMessage {
        node_id: node.into(),
        channel: ch.into(),
        seq,
        t_acq_us: t,
        mode: ProcessingMode::Features,
        unit: Unit::MetrePerSecondSquared,
        fs_hz: 1000.0,
        window_len: 256,
        payload: Payload::Features(f.iter().map(|(k, v)| (k.to_string(), *v)).collect()),
    }
}

fn raw_msg(node: &str, ch: &str, seq: u64, t: i64, samples: Vec<f64>) -> MeasurementMessage {
    MeasurementMessage {
        node_id: node.into(),
        channel: ch.into(),
        seq,
        t_acq_us: t,
        mode: ProcessingMode::Raw,
        unit: Unit::MetrePerSecondSquared,
        fs_hz: 1000.0,
        window_len: samples.len() as u32,
        payload: Payload::Raw(samples),
    }
}

fn topic(m: &MeasurementMessage) -> String {
    let kind = if m.mode == ProcessingMode::Raw { "raw" } else { "features" };
    format!("dsm/v1/plant1/{}/{}/{kind}", m.node_id, m.channel)
}

fn read_ndjson(p: &Path) -> Vec<WireRecord> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn model(version: &str, names: &[&str], w: &[f64], b: f64) -> QualityModel {
    QualityModel {
        version: version.into(),
        feature_names: names.iter().map(|s| s.to_string()).collect(),
        mu: vec![0.0; names.len()],
        sigma: vec![1.0; names.len()],
        w: w.to_vec(),
        b,
        threshold: 0.5,
        trained_on: "test".into(),
        created_at: "2026-01-01T00:00:00Z".into(),
    }
}

struct Rig {
    dir: tempfile::TempDir,
    broker: Broker,
}

impl Rig {
    fn new() -> Rig {
        Rig {
            dir: tempfile::tempdir().unwrap(),
            broker: Broker::start(BrokerConfig::default()),
        }
    }

    fn ctx(&self) -> BuildContext {
        BuildContext {
            broker: Some(self.broker.clone()),
            base_dir: self.dir.path().to_owned(),
            ..BuildContext::default()
        }
    }

    fn start(&self, graph: Value) -> Result<Pipeline, WiresError> {
        let spec = load_graph(&graph.to_string(), &Registry::builtin()).expect("valid graph");
        Pipeline::start(&spec, &Registry::builtin(), &self.ctx())
    }

    fn publish_all(&self, msgs: &[MeasurementMessage]) {
        let c = self.broker.local_client("pub", LocalOptions::default()).unwrap();
        for m in msgs {
            c.publish(&topic(m), encode_message(m).unwrap(), QoS::AtLeastOnce).unwrap();
        }
        self.broker.barrier().unwrap();
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }
}

fn settle(p: &Pipeline) {
    assert!(p.wait_quiescent(Duration::from_secs(10)), "pipeline did not settle");
}

#[test]
fn identity_pipeline_logs_input_in_order() {
    let rig = Rig::new();
    let p = rig
        .start(json!({
            "stages": [
                {"id": "sub", "kind": "subscriber", "params": {"filter": "dsm/v1/plant1/#"}},
                {"id": "log", "kind": "logger", "params": {"path": "out.ndjson"}}
            ],
            "edges": [{"from": "sub.out", "to": "log.in"}]
        }))
        .unwrap();
    let msgs: Vec<MeasurementMessage> = (0..100)
        .map(|k| {
            if k % 3 == 0 {
                raw_msg("n1", "vib_x", k, T0 + k as i64 * 1000, vec![k as f64, 1.5, -2.0])
            } else {
                features_msg("n2", "air", k, T0 + k as i64 * 1000, &[("mean", k as f64 * 0.1)])
            }
        })
        .collect();
    rig.publish_all(&msgs);
    settle(&p);
    let report = p.stop();
    let got = read_ndjson(&rig.path("out.ndjson"));
    let want: Vec<WireRecord> = msgs.iter().map(WireRecord::from_message).collect();
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g.t_us, w.t_us);
        assert_eq!(g.source, w.source);
        assert_eq!(g.values, w.values);
        assert_eq!(g.samples, w.samples);
        assert_eq!(g.tags, w.tags);
    }
    assert_eq!(report.consumed, 100);
    assert_eq!(report.emitted, 100);
    assert!(report.conserved());
}

#[test]
fn malformed_messages_are_dead_lettered() {
    let rig = Rig::new();
    let p = rig
        .start(json!({
            "stages": [
                {"id": "sub", "kind": "subscriber", "params": {"filter": "x/#"}},
                {"id": "log", "kind": "logger", "params": {"path": "out.ndjson"}}
            ],
            "edges": [{"from": "sub.out", "to": "log.in"}]
        }))
        .unwrap();
    let c = rig.broker.local_client("pub", LocalOptions::default()).unwrap();
    c.publish("x/a", b"not json".to_vec(), QoS::AtLeastOnce).unwrap();
    let good = features_msg("n", "c", 0, T0, &[("mean", 1.0)]);
    c.publish("x/b", encode_message(&good).unwrap(), QoS::AtLeastOnce).unwrap();
    rig.broker.barrier().unwrap();
    settle(&p);
    let r = p.stop();
    assert_eq!((r.consumed, r.emitted, r.dead_lettered), (2, 1, 1));
}

fn scenario_graph(model_path: &str) -> Value {
    json!({
        "stages": [
            {"id": "vib", "kind": "subscriber", "params": {"filter": "dsm/v1/plant1/vib/+/+"}},
            {"id": "air", "kind": "subscriber", "params": {"filter": "dsm/v1/plant1/air/+/+"}},
            {"id": "win", "kind": "window", "params": {"size": 8, "hop": 8}},
            {"id": "fv", "kind": "feature", "params": {}},
            {"id": "fa", "kind": "feature", "params": {"names": ["mean"]}},
            {"id": "join", "kind": "join", "params": {"inputs": ["vib"], "asof": ["air"], "tolerance_us": 2000}},
            {"id": "score", "kind": "score", "params": {"model_path": model_path}},
            {"id": "thr", "kind": "threshold", "params": {"field": "risk", "level": 0.9}},
            {"id": "log", "kind": "logger", "params": {"path": "scored.ndjson"}},
            {"id": "dead", "kind": "logger", "params": {"path": "dead.ndjson"}}
        ],
        "edges": [
            {"from": "vib.out", "to": "win.in"},
            {"from": "win.out", "to": "fv.in"},
            {"from": "air.out", "to": "fa.in"},
            {"from": "fv.out", "to": "join.vib"},
            {"from": "fa.out", "to": "join.air"},
            {"from": "join.out", "to": "score.in"},
            {"from": "score.out", "to": "thr.in"},
            {"from": "thr.out", "to": "log.in"},
            {"from": "score.dead", "to": "dead.in"}
        ]
    })
}

/// consumed = emitted + dropped + dead-lettered on randomized replays that
/// exercise window residue, join drops, missing context and malformed input.
#[test]
fn stop_conserves_records() {
    for seed in 0..5u64 {
        let rig = Rig::new();
        save_model(&model("v1", &["x.rms", "flow.mean"], &[0.3, -0.2], 0.1), &rig.path("m.json")).unwrap();
        let p = rig.start(scenario_graph("m.json")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rig.broker.local_client("pub", LocalOptions::default()).unwrap();
        let mut sent = 0u64;
        let mut air_seq = 0;
        for k in 0..60u64 {
            let t = T0 + k as i64 * 6000 + 10_000;
            let n = rng.random_range(2..7);
            let m = raw_msg("vib", "x", k, t, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
            c.publish(&topic(&m), encode_message(&m).unwrap(), QoS::AtLeastOnce).unwrap();
            sent += 1;
            if k % 4 == 1 && rng.random_bool(0.8) {
                let a = features_msg("air", "flow", air_seq, t + rng.random_range(-3000..3000), &[("mean", 3.0), ("std", 0.1)]);
                air_seq += 1;
                c.publish(&topic(&a), encode_message(&a).unwrap(), QoS::AtLeastOnce).unwrap();
                sent += 1;
            }
            if rng.random_bool(0.05) {
                c.publish("dsm/v1/plant1/air/flow/features", b"{}".to_vec(), QoS::AtLeastOnce).unwrap();
                sent += 1;
            }
            if k % 10 == 9 {
                rig.broker.barrier().unwrap();
                p.watermark(t - 10_000).unwrap();
            }
        }
        rig.broker.barrier().unwrap();
        settle(&p);
        let r = p.stop();
        assert_eq!(r.consumed, sent, "seed {seed}");
        assert!(r.conserved(), "seed {seed}: {r:?}");
        let scored = read_ndjson(&rig.path("scored.ndjson")).len() as u64;
        let dead = read_ndjson(&rig.path("dead.ndjson")).len() as u64;
        assert!(scored > 0, "seed {seed}");
        assert_eq!(r.stages["score"].records_in, scored + dead);
    }
}

/// Records never reorder along a chain, whatever the arrival timing.
#[test]
fn per_edge_fifo_over_randomized_replays() {
    for seed in 0..10u64 {
        let rig = Rig::new();
        let p = rig
            .start(json!({
                "stages": [
                    {"id": "sub", "kind": "subscriber", "params": {"filter": "dsm/v1/plant1/#"}},
                    {"id": "f", "kind": "feature"},
                    {"id": "t", "kind": "threshold", "params": {"field": "mean", "level": 0.0}},
                    {"id": "log", "kind": "logger", "params": {"path": "out.ndjson"}}
                ],
                "edges": [
                    {"from": "sub.out", "to": "f.in"},
                    {"from": "f.out", "to": "t.in"},
                    {"from": "t.out", "to": "log.in"}
                ]
            }))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rig.broker.local_client("pub", LocalOptions::default()).unwrap();
        let n = rng.random_range(50..300u64);
        for k in 0..n {
            let m = raw_msg("n", "c", k, T0 + k as i64, vec![rng.random_range(-1.0..1.0); 4]);
            c.publish_nowait(&topic(&m), encode_message(&m).unwrap(), QoS::AtLeastOnce).unwrap();
            if rng.random_bool(0.05) {
                std::thread::sleep(Duration::from_micros(rng.random_range(0..2000)));
            }
        }
        rig.broker.barrier().unwrap();
        settle(&p);
        p.stop();
        let seqs: Vec<u64> = read_ndjson(&rig.path("out.ndjson"))
            .iter()
            .map(|r| r.tags["seq"].parse().unwrap())
            .collect();
        assert_eq!(seqs, (0..n).collect::<Vec<_>>(), "seed {seed}");
    }
}

fn score_graph(model_path: &str) -> Value {
    json!({
        "stages": [
            {"id": "sub", "kind": "subscriber", "params": {"filter": "none/#"}},
            {"id": "in", "kind": "feature"},
            {"id": "score", "kind": "score", "params": {
                "model_path": model_path,
                "recommend": {"rpm": [12000, 18000, 24000], "feed": [1, 2, 4]}
            }},
            {"id": "log", "kind": "logger", "params": {"path": "scored.ndjson"}},
            {"id": "dead", "kind": "logger", "params": {"path": "dead.ndjson"}}
        ],
        "edges": [
            {"from": "sub.out", "to": "in.in"},
            {"from": "in.out", "to": "score.in"},
            {"from": "score.out", "to": "log.in"},
            {"from": "score.dead", "to": "dead.in"}
        ]
    })
}

fn frec(t: i64, f: &[(&str, f64)]) -> WireRecord {
    let mut r = WireRecord::new(t, "gateway", "joined");
    r.values = f.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    r.weight = 1;
    r
}

#[test]
fn zero_standardized_features_score_sigmoid_of_bias() {
    let rig = Rig::new();
    let mut m = model("v1", &["a", "b"], &[2.0, -3.0], -0.7);
    m.mu = vec![1.5, -4.0];
    m.sigma = vec![2.0, 0.5];
    save_model(&m, &rig.path("m.json")).unwrap();
    let p = rig.start(score_graph("m.json")).unwrap();
    p.inject("in", frec(T0, &[("a", 1.5), ("b", -4.0)])).unwrap();
    settle(&p);
    p.stop();
    let out = read_ndjson(&rig.path("scored.ndjson"));
    assert_eq!(out[0].values["risk"], sigmoid(-0.7));
    assert!((out[0].values["risk"] - 1.0 / (1.0 + 0.7f64.exp())).abs() < 1e-15);
    assert_eq!(out[0].values["risk_alarm"], 0.0);
    assert_eq!(out[0].tags["model_version"], "v1");
}

#[test]
fn missing_feature_goes_to_dead_letter() {
    let rig = Rig::new();
    save_model(&model("v1", &["a", "b"], &[1.0, 1.0], 0.0), &rig.path("m.json")).unwrap();
    let p = rig.start(score_graph("m.json")).unwrap();
    p.inject("in", frec(T0, &[("a", 1.0)])).unwrap();
    p.inject("in", frec(T0 + 1, &[("a", 1.0), ("b", 0.0)])).unwrap();
    settle(&p);
    let r = p.stop();
    let dead = read_ndjson(&rig.path("dead.ndjson"));
    assert_eq!(dead.len(), 1);
    assert!(dead[0].tags["dead_reason"].contains("missing feature b"));
    assert_eq!(read_ndjson(&rig.path("scored.ndjson")).len(), 1);
    assert_eq!((r.consumed, r.emitted, r.dead_lettered), (2, 1, 1));
}

#[test]
fn pipeline_scores_match_offline_scoring_bit_for_bit() {
    let rig = Rig::new();
    let mut m = model("v1", &["params.feed_mm_s", "params.chip_load", "air.mean"], &[1.1, 0.4, -0.9], -0.3);
    m.mu = vec![2.0, 0.1, 3.0];
    m.sigma = vec![1.0, 0.05, 0.7];
    save_model(&m, &rig.path("m.json")).unwrap();
    let p = rig.start(score_graph("m.json")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut inputs = Vec::new();
    for k in 0..300 {
        let feed: f64 = rng.random_range(0.5..5.0);
        let rpm: f64 = rng.random_range(10000.0..25000.0);
        let r = frec(
            T0 + k,
            &[
                ("params.feed_mm_s", feed),
                ("params.spindle_rpm", rpm),
                ("params.chip_load", feed / (rpm / 1000.0)),
                ("air.mean", rng.random_range(0.5..4.5)),
            ],
        );
        inputs.push(r.clone());
        p.inject("in", r).unwrap();
    }
    settle(&p);
    p.stop();
    let out = read_ndjson(&rig.path("scored.ndjson"));
    assert_eq!(out.len(), inputs.len());
    for (o, i) in out.iter().zip(&inputs) {
        let offline = predict_risk(&m, &i.values).unwrap();
        assert_eq!(o.values["risk"].to_bits(), offline.to_bits());
        // Independent evaluation of the logistic formula.
        let z: f64 = m.b
            + (0..3)
                .map(|j| m.w[j] * (i.values[&m.feature_names[j]] - m.mu[j]) / m.sigma[j])
                .sum::<f64>();
        assert!((o.values["risk"] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
        if o.values["risk_alarm"] == 1.0 {
            // Exhaustive search over the configured grid.
            let mut best = (f64::INFINITY, 0.0, 0.0);
            for feed in [1.0, 2.0, 4.0] {
                for rpm in [12000.0, 18000.0, 24000.0] {
                    let mut f: BTreeMap<String, f64> = i.values.clone();
                    f.insert("params.spindle_rpm".into(), rpm);
                    f.insert("params.feed_mm_s".into(), feed);
                    f.insert("params.chip_load".into(), feed / (rpm / 1000.0));
                    let r = predict_risk(&m, &f).unwrap();
                    if r < best.0 {
                        best = (r, rpm, feed);
                    }
                }
            }
            assert_eq!(o.values["rec_risk"], best.0);
            assert_eq!((o.values["rec_spindle_rpm"], o.values["rec_feed_mm_s"]), (best.1, best.2));
        } else {
            assert!(!o.values.contains_key("rec_risk"));
        }
    }
}

#[test]
fn model_swap_after_record_500() {
    let rig = Rig::new();
    save_model(&model("v1", &["a"], &[1.0], 0.0), &rig.path("v1.json")).unwrap();
    save_model(&model("v2", &["a"], &[-1.0], 0.5), &rig.path("v2.json")).unwrap();
    std::fs::write(rig.path("broken.json"), "{\"version\": 3}").unwrap();
    let p = rig.start(score_graph("v1.json")).unwrap();
    for k in 0..500 {
        p.inject("in", frec(T0 + k, &[("a", k as f64 / 500.0)])).unwrap();
    }
    settle(&p);
    assert!(matches!(
        p.control("score", Control::ReloadModel("broken.json".into())).unwrap(),
        ControlReply::Error(_)
    ));
    assert_eq!(p.control("score", Control::ActiveModel).unwrap(), ControlReply::Model("v1".into()));
    assert_eq!(
        p.control("score", Control::ReloadModel("v2.json".into())).unwrap(),
        ControlReply::Model("v2".into())
    );
    for k in 500..1000 {
        p.inject("in", frec(T0 + k, &[("a", k as f64 / 500.0)])).unwrap();
    }
    settle(&p);
    p.stop();
    let out = read_ndjson(&rig.path("scored.ndjson"));
    assert_eq!(out.len(), 1000);
    for (k, r) in out.iter().enumerate() {
        let v = if k < 500 { "v1" } else { "v2" };
        assert_eq!(r.tags["model_version"], v, "record {}", k + 1);
        let a = k as f64 / 500.0;
        let z = if k < 500 { a } else { 0.5 - a };
        assert_eq!(r.values["risk"], sigmoid(z));
    }
}

#[test]
fn missing_model_fails_startup_before_subscribing() {
    let rig = Rig::new();
    let before = rig.broker.session_count().unwrap();
    let g = json!({
        "stages": [
            {"id": "sub", "kind": "subscriber", "params": {"filter": "dsm/v1/#"}},
            {"id": "f", "kind": "feature"},
            {"id": "score", "kind": "score", "params": {"model_path": "absent.json"}}
        ],
        "edges": [
            {"from": "sub.out", "to": "f.in"},
            {"from": "f.out", "to": "score.in"}
        ]
    });
    match rig.start(g) {
        Err(WiresError::StartupFailure { stage, .. }) => assert_eq!(stage, "score"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("started without a model"),
    }
    assert_eq!(rig.broker.session_count().unwrap(), before);
}

#[derive(Clone, Default)]
struct Capture(Arc<Mutex<Vec<Vec<u8>>>>);

impl BatchTransport for Capture {
    fn post(&mut self, batch_id: &str, body: &[u8]) -> Result<IngestAck, CloudError> {
        self.0.lock().unwrap().push(body.to_vec());
        Ok(IngestAck {
            batch_id: batch_id.into(),
            stored: body.iter().filter(|&&b| b == b'\n').count(),
            duplicate: false,
        })
    }
}

#[test]
fn cloud_emitter_batches_and_tags_session() {
    let rig = Rig::new();
    let cap = Capture::default();
    let c2 = cap.clone();
    let ctx = BuildContext {
        session: "run-7".into(),
        cloud_transport: Some(Arc::new(move || Box::new(c2.clone()) as Box<dyn BatchTransport>)),
        ..rig.ctx()
    };
    let g = json!({
        "stages": [
            {"id": "sub", "kind": "subscriber", "params": {"filter": "none/#"}},
            {"id": "f", "kind": "feature"},
            {"id": "cloud", "kind": "emitter", "params": {"target": "cloud", "batch_size": 10}}
        ],
        "edges": [
            {"from": "sub.out", "to": "f.in"},
            {"from": "f.out", "to": "cloud.in"}
        ]
    });
    let spec = load_graph(&g.to_string(), &Registry::builtin()).unwrap();
    let p = Pipeline::start(&spec, &Registry::builtin(), &ctx).unwrap();
    for k in 0..25 {
        p.inject("f", frec(T0 + k * 1_000_000, &[("x", k as f64)])).unwrap();
    }
    settle(&p);
    let batches_before_stop = cap.0.lock().unwrap().len();
    let r = p.stop();
    let batches = cap.0.lock().unwrap().clone();
    assert_eq!(batches_before_stop, 2);
    assert_eq!(batches.len(), 3);
    let lines: Vec<Value> = batches
        .iter()
        .flat_map(|b| String::from_utf8(b.clone()).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect::<Vec<Value>>())
        .collect();
    assert_eq!(lines.len(), 25);
    assert!(lines.iter().all(|l| l["tags"]["session"] == "run-7"));
    assert_eq!(r.emitted, 25);
}

#[test]
fn deliveries_can_be_injected_without_a_broker() {
    let dir = tempfile::tempdir().unwrap();
    let g = json!({
        "stages": [
            {"id": "sub", "kind": "subscriber", "params": {"filter": "a/#"}},
            {"id": "log", "kind": "logger", "params": {"path": "o.ndjson"}}
        ],
        "edges": [{"from": "sub.out", "to": "log.in"}]
    });
    let ctx = BuildContext {
        base_dir: dir.path().to_owned(),
        ..BuildContext::default()
    };
    let spec = load_graph(&g.to_string(), &Registry::builtin()).unwrap();
    let p = Pipeline::start(&spec, &Registry::builtin(), &ctx).unwrap();
    let m = features_msg("n", "c", 0, T0, &[("mean", 2.0)]);
    p.inject_delivery(
        "sub",
        Delivery {
            topic: "a/b".into(),
            payload: encode_message(&m).unwrap(),
            qos: QoS::AtMostOnce,
            dup: false,
            packet_id: None,
        },
    )
    .unwrap();
    settle(&p);
    let r = p.stop();
    assert_eq!(r.consumed, 1);
    assert_eq!(read_ndjson(&dir.path().join("o.ndjson"))[0].values["mean"], 2.0);
}
