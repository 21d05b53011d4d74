use std::collections::BTreeMap;

use dsm_cloud::{
    batch_id, export_dataset, write_export, BatchTransport, CloudError, CloudSink, ExportError,
    HttpTransport, IngestAck, SessionFilter, Store, Uploader,
};
use rand::{Rng, SeedableRng};

fn record(session: &str, channel: &str, t: i64, values: &[(&str, f64)]) -> String {
    let v: BTreeMap<_, _> = values.iter().cloned().collect();
    serde_json::json!({
        "t_us": t,
        "source": {"node_id": "gw", "channel": channel},
        "values": v,
        "tags": {"session": session},
    })
    .to_string()
}

/// Fails 30% of posts: half before the request leaves, half after the sink
/// stored it but before the ack comes back.
struct Faulty {
    inner: HttpTransport,
    rng: rand_chacha::ChaCha8Rng,
    failures: u32,
}

impl BatchTransport for Faulty {
    fn post(&mut self, id: &str, body: &[u8]) -> Result<IngestAck, CloudError> {
        let u: f64 = self.rng.random();
        if u < 0.15 {
            self.failures += 1;
            return Err(CloudError::Transport("connection reset".into()));
        }
        let ack = self.inner.post(id, body)?;
        if u < 0.30 {
            self.failures += 1;
            return Err(CloudError::Transport("ack lost".into()));
        }
        Ok(ack)
    }
}

#[test]
fn same_batch_twice_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let sink = CloudSink::start(dir.path(), "127.0.0.1:0").unwrap();
    let mut t = HttpTransport::new(&sink.url());
    let body = format!("{}\n", record("s1", "joined", 10, &[("a", 1.0)]));
    let id = batch_id(body.as_bytes());
    let a1 = t.post(&id, body.as_bytes()).unwrap();
    let a2 = t.post(&id, body.as_bytes()).unwrap();
    assert_eq!((a1.stored, a1.duplicate), (1, false));
    assert_eq!((a2.stored, a2.duplicate), (0, true));
    assert!(matches!(t.post("abc", body.as_bytes()), Err(CloudError::Rejected(_))));
    assert!(matches!(
        t.post(&batch_id(b"garbage\n"), b"garbage\n"),
        Err(CloudError::Rejected(_))
    ));
    let sessions: serde_json::Value =
        serde_json::from_str(&ureq::get(&format!("{}/v1/sessions", sink.url())).call().unwrap().body_mut().read_to_string().unwrap())
            .unwrap();
    assert_eq!(sessions["sessions"][0]["records"], 1);
    sink.stop();
}

#[test]
fn thirty_percent_failures_store_exactly_the_sent_set() {
    let dir = tempfile::tempdir().unwrap();
    let sink = CloudSink::start(dir.path(), "127.0.0.1:0").unwrap();
    let faulty = Faulty {
        inner: HttpTransport::new(&sink.url()),
        rng: rand_chacha::ChaCha8Rng::seed_from_u64(30),
        failures: 0,
    };
    let mut up = Uploader::new(Box::new(faulty));
    up.backoff = std::time::Duration::from_millis(1);
    let mut sent = Vec::new();
    for b in 0..100 {
        let lines: Vec<String> = (0..5)
            .map(|k| record("fault", "joined", (b * 5 + k) as i64 + 1, &[("x", b as f64)]))
            .collect();
        up.send_lines(&lines).unwrap();
        sent.extend(lines);
    }
    assert!(up.retries >= 20, "only {} retries injected", up.retries);
    let stored = std::fs::read_to_string(Store::session_path(dir.path(), "fault")).unwrap();
    let mut stored: Vec<&str> = stored.lines().collect();
    let mut sent: Vec<&str> = sent.iter().map(String::as_str).collect();
    stored.sort();
    sent.sort();
    assert_eq!(stored, sent);
    sink.stop();
}

#[test]
fn export_joins_nearest_label() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::open(dir.path()).unwrap();
    // 39 windows of 256 ms and 10 labels at second centers.
    let mut lines: Vec<String> = (0..39)
        .map(|k| record("s10", "joined", 1 + k * 256_000, &[("rms", k as f64)]))
        .collect();
    for s in 0..10 {
        lines.push(record("s10", "labels", s * 1_000_000 + 500_000, &[("label", (s % 2) as f64), ("p", 0.5)]));
    }
    store.ingest(None, lines.join("\n").as_bytes()).unwrap();
    let recs = export_dataset(dir.path(), &SessionFilter::all()).unwrap();
    assert_eq!(recs.len(), 39);
    assert!(recs.iter().all(|r| r.label.is_some()));
    // Window at 1.024 s is nearest to the label at 1.5 s.
    assert_eq!(recs[4].label, Some(1));
    let mut a = Vec::new();
    let mut b = Vec::new();
    write_export(&recs, &mut a).unwrap();
    write_export(&export_dataset(dir.path(), &SessionFilter::all()).unwrap(), &mut b).unwrap();
    assert_eq!(a, b);
    assert!(matches!(
        export_dataset(dir.path(), &SessionFilter(Some("nope".into()))),
        Err(ExportError::NoSessions)
    ));
}
