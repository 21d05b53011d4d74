use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, Mutex};

use dsm_cli::commands::deploy;
use dsm_cli::{run_session, Overrides, RunConfig, RunOptions, SinkMode};
use dsm_quality::SessionRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config")
}

fn dsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsm"))
        .args(args)
        .current_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../.."))
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn invalid_graph_exits_2_and_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("bad.json");
    std::fs::write(
        &g,
        json!({
            "stages": [
                {"id": "sub", "kind": "subscriber", "params": {"filter": "dsm/v1/plant1/#"}},
                {"id": "x", "kind": "teleporter"},
                {"id": "f", "kind": "feature"}
            ],
            "edges": [{"from": "sub.out", "to": "nowhere.in"}]
        })
        .to_string(),
    )
    .unwrap();
    let o = dsm(&["run", "--graph", s(&g), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("teleporter"), "{err}");
    assert!(err.contains("nowhere"), "{err}");
    assert!(err.contains("stage f: input in has no edge"), "{err}");
}

#[test]
fn missing_inputs_and_bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsm(&["run", "--scenario", s(&dir.path().join("none.json")), "--nodes", "config/nodes"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dsm(&["run", "--mode", "4"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dsm(&["report", "--out", s(&dir.path().join("never-ran"))]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn smoke_run_then_report_and_export_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = dsm(&["run", "--duration", "5", "--seed", "3", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("session desk-3"), "{stdout}");

    let before = std::fs::read(out.join("report.json")).unwrap();
    assert_eq!(dsm(&["report", "--out", s(&out)]).status.code(), Some(0));
    assert_eq!(std::fs::read(out.join("report.json")).unwrap(), before);

    let (a, b) = (dir.path().join("a.ndjson"), dir.path().join("b.ndjson"));
    for f in [&a, &b] {
        let o = dsm(&["export", "--store", s(&out.join("sink")), "--session", "desk-3", "--out", s(f)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read_to_string(a).unwrap();
    assert!(a.lines().count() > 10);
    assert_eq!(a, std::fs::read_to_string(b).unwrap());
    let first: SessionRecord = serde_json::from_str(a.lines().next().unwrap()).unwrap();
    assert_eq!(first.session_id, "desk-3");
    assert!(first.label.is_some());
}

/// Labeled records from a known logistic truth over four sessions' worth
/// of feature names used by the default model.
fn synthetic(path: &Path, single_class: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut text = String::new();
    for i in 0..200 {
        let feed: f64 = rng.random_range(1.0..50.0);
        let wear: f64 = rng.random_range(0.0..1.0);
        let rpm: f64 = rng.random_range(3000.0..24000.0);
        let air: f64 = rng.random_range(1.0..4.0);
        let chip = feed / (rpm / 1000.0);
        let z = -6.0 + 0.15 * feed + 3.0 * wear + 2.0 * chip - 0.5 * air;
        let p = 1.0 / (1.0 + (-z).exp());
        let label = if single_class { 0 } else { rng.random_bool(p) as u8 };
        let r = json!({
            "session_id": format!("syn-{:02}", i / 20),
            "t_us": 1_700_000_000_000_000i64 + i as i64 * 250_000,
            "features": {
                "params.feed_mm_s": feed, "params.tool_wear": wear,
                "params.chip_load": chip, "airflow.mean": air
            },
            "label": label
        });
        text.push_str(&r.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn retraining_writes_an_identical_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.ndjson");
    synthetic(&data, false);
    let mut models = Vec::new();
    for k in ["a", "b"] {
        let out = dir.path().join(k);
        let o = dsm(&["train", "--dataset", s(&data), "--seed", "9", "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        models.push(std::fs::read(out.join("model.json")).unwrap());
    }
    assert_eq!(models[0], models[1]);
    let m: Value = serde_json::from_slice(&models[0]).unwrap();
    assert!(m["version"].as_str().unwrap().starts_with("q-"));
    // A different split seed is a different model.
    let out = dir.path().join("c");
    assert_eq!(dsm(&["train", "--dataset", s(&data), "--seed", "10", "--out", s(&out)]).status.code(), Some(0));
    let other: Value = serde_json::from_slice(&std::fs::read(out.join("model.json")).unwrap()).unwrap();
    assert_ne!(other["version"], m["version"]);
}

#[test]
fn single_class_dataset_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.ndjson");
    synthetic(&data, true);
    let o = dsm(&["train", "--dataset", s(&data), "--out", s(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("single class"));
    assert!(!dir.path().join("m/model.json").exists());
}

#[test]
fn deploy_swaps_the_model_of_a_running_gateway() {
    let dir = tempfile::tempdir().unwrap();
    let shipped: Value = serde_json::from_slice(&std::fs::read(config().join("model.json")).unwrap()).unwrap();
    let mut next = shipped.clone();
    next["version"] = json!("q-redeployed");
    let good = dir.path().join("next.json");
    std::fs::write(&good, next.to_string()).unwrap();
    let corrupt = dir.path().join("corrupt.json");
    std::fs::write(&corrupt, "{\"version\": \"q-x\", \"w\": [").unwrap();

    let c = config();
    let cfg = RunConfig::load(
        &c.join("scenario.json"),
        &c.join("nodes"),
        &c.join("graph.json"),
        &Overrides {
            duration_s: Some(3.0),
            ..Overrides::default()
        },
    )
    .unwrap();
    let results = Arc::new(Mutex::new(Vec::new()));
    let r = results.clone();
    let (g, bad) = (good.clone(), corrupt.clone());
    let opts = RunOptions {
        out: dir.path().join("run"),
        sink: SinkMode::Off,
        admin: Some("127.0.0.1:0".into()),
        on_ready: Some(Arc::new(move |addr| {
            let addr = addr.expect("admin address").to_string();
            let mut r = r.lock().unwrap();
            r.push(deploy(&g, &addr).map_err(|e| e.exit_code()));
            r.push(deploy(&bad, &addr).map_err(|e| e.exit_code()));
        })),
        ..RunOptions::default()
    };
    let out = run_session(&cfg, &opts).unwrap();
    let results = results.lock().unwrap().clone();
    assert_eq!(results, vec![Ok("q-redeployed".to_string()), Err(2)]);
    // The corrupt upload left the new model in place.
    assert_eq!(out.report.model_version.as_deref(), Some(shipped["version"].as_str().unwrap()));
    let scored = std::fs::read_to_string(dir.path().join("run/scored.ndjson")).unwrap();
    assert!(scored.lines().all(|l| l.contains("q-redeployed")), "records scored by the old model");
}

#[test]
fn deploy_to_an_unreachable_gateway_exits_3() {
    let o = dsm(&["deploy", "--model", "config/model.json", "--gateway", "127.0.0.1:1"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn deploy_of_a_missing_file_exits_2() {
    let o = dsm(&["deploy", "--model", "config/none.json", "--gateway", "127.0.0.1:1"]);
    assert_eq!(o.status.code(), Some(2));
}
