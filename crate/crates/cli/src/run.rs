//! The run orchestrator.
//!
//! Components run in lock-step on a virtual clock. Each tick the machine
//! takes pending commands, the simulator advances, the nodes publish what
//! their windows produced, and the gateway is driven to quiescence under a
//! watermark that trails simulated time by the longest window. Nothing in
//! the data path reads the wall clock, so a seed fixes every artifact.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use dsm_broker::{Broker, BrokerConfig, SyncResponder};
use dsm_cloud::{BatchTransport, CloudError, CloudSink, HttpTransport, IngestAck, Uploader, LABEL_CHANNEL};
use dsm_core::clock::VirtualClock;
use dsm_node::{LocalTransport, NodeStats, Sample, SensorNode, SourceBatch};
use dsm_sim::{LabelRow, Simulator};
use dsm_wires::{BuildContext, Pipeline, PipelineReport, Registry, TransportFactory};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::admin::AdminServer;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::machine::Machine;
use crate::report::{build_report, RunReport};

pub const TICK_US: i64 = 50_000;
/// Source of the ground-truth label records uploaded next to the features.
pub const LABEL_SOURCE: &str = "trimming-sim";

#[derive(Clone, Default)]
pub enum SinkMode {
    /// Start a sink storing into `<out>/sink`.
    #[default]
    Local,
    /// Upload to an already running sink.
    Remote(String),
    /// No uplink; cloud batches are acknowledged and discarded.
    Off,
}

/// Uplink used with [`SinkMode::Off`].
struct Discard;

impl BatchTransport for Discard {
    fn post(&mut self, batch_id: &str, _body: &[u8]) -> std::result::Result<IngestAck, CloudError> {
        Ok(IngestAck {
            batch_id: batch_id.to_owned(),
            stored: 0,
            duplicate: false,
        })
    }
}

#[derive(Clone, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Defaults to `<scenario>-<seed>`.
    pub session: Option<String>,
    pub sink: SinkMode,
    /// Bind address of the gateway admin endpoint.
    pub admin: Option<String>,
    /// Pace ticks to wall-clock time.
    pub realtime: bool,
    /// Replaces the HTTP uplink of the gateway and the label upload.
    pub cloud_transport: Option<TransportFactory>,
    /// Called once the gateway is up, with the admin address if any.
    pub on_ready: Option<Arc<dyn Fn(Option<std::net::SocketAddr>) + Send + Sync>>,
}

/// `run.json`: what was run, for the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub session: String,
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    pub mode: Option<u8>,
    pub tick_us: i64,
    pub watermark_lag_us: i64,
    pub nodes: Vec<String>,
    pub stages: Vec<String>,
    pub model_version: Option<String>,
    pub ticks: u64,
}

pub struct RunOutcome {
    pub report: RunReport,
    pub pipeline: PipelineReport,
    pub node_stats: BTreeMap<String, NodeStats>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?))
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v).map_err(CliError::runtime)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn label_lines(labels: &[LabelRow], session: &str) -> Vec<String> {
    labels
        .iter()
        .map(|l| {
            json!({
                "t_us": l.t_us,
                "source": {"node_id": LABEL_SOURCE, "channel": LABEL_CHANNEL},
                "values": {"label": l.label as f64, "p": l.p},
                "tags": {"session": session},
            })
            .to_string()
        })
        .collect()
}

/// Runs one session end to end and writes its artifacts under `opts.out`.
pub fn run_session(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let out = &opts.out;
    fs::create_dir_all(out)?;
    let session = opts.session.clone().unwrap_or_else(|| cfg.session_id());
    let sc = &cfg.scenario;
    write_json(&out.join("scenario.json"), sc)?;

    // Redelivery is left off: every client is in-process and acknowledges
    // on receipt, and a wall-clock ticker would make duplicates timing-dependent.
    let broker = Broker::start(BrokerConfig {
        redeliver_tick: None,
        ..BrokerConfig::default()
    });
    let clock = VirtualClock::new(sc.start_epoch_us);
    let responder = SyncResponder::spawn(&broker, Arc::new(clock.clone())).map_err(CliError::runtime)?;

    let (sink, sink_url) = match &opts.sink {
        SinkMode::Local => {
            let root = out.join("sink");
            if root.exists() {
                fs::remove_dir_all(&root)?;
            }
            let s = CloudSink::start(&root, "127.0.0.1:0").map_err(CliError::runtime)?;
            let url = s.url();
            (Some(s), Some(url))
        }
        SinkMode::Remote(u) => (None, Some(u.clone())),
        SinkMode::Off => (None, None),
    };

    let ctx = BuildContext {
        broker: Some(broker.clone()),
        clock: Arc::new(clock.clone()),
        site: sc.site.clone(),
        session: session.clone(),
        base_dir: out.clone(),
        sink_url: sink_url.clone(),
        cloud_transport: match (&opts.cloud_transport, &opts.sink) {
            (Some(f), _) => Some(f.clone()),
            (None, SinkMode::Off) => Some(Arc::new(|| Box::new(Discard) as Box<dyn BatchTransport>)),
            (None, _) => None,
        },
    };
    let pipeline = Pipeline::start(&cfg.graph, &Registry::builtin(), &ctx).map_err(CliError::runtime)?;
    let pipeline = Arc::new(pipeline);
    let score_stage = cfg
        .graph
        .doc
        .stages
        .iter()
        .find(|s| s.kind == "score")
        .map(|s| s.id.clone());
    let model_version = match &score_stage {
        Some(id) => pipeline
            .describe(id)
            .ok()
            .and_then(|v| v.get("model_version").and_then(|x| x.as_str()).map(String::from)),
        None => None,
    };
    for s in cfg.graph.doc.stages.iter().filter(|s| s.kind == "emitter") {
        if let Ok(v) = pipeline.describe(&s.id) {
            if let Some(a) = v.get("ws_addr").and_then(|a| a.as_str()) {
                eprintln!("hmi websocket on ws://{a}");
            }
        }
    }
    let admin = match &opts.admin {
        Some(addr) => {
            let a = AdminServer::start(
                addr,
                pipeline.clone(),
                score_stage.clone(),
                broker.metrics().clone(),
                out.join("models"),
            )
            .map_err(|e| CliError::Runtime(format!("gateway admin on {addr}: {e}")))?;
            eprintln!("gateway admin on http://{}", a.local_addr());
            Some(a)
        }
        None => None,
    };

    let mut machine = Machine::new(&broker, &sc.site, Box::new(create(&out.join("machine.ndjson"))?))?;
    let mut nodes = Vec::with_capacity(cfg.nodes.len());
    for n in &cfg.nodes {
        let log = create(&out.join("nodes").join(format!("{}.ndjson", n.node_id)))?;
        let node = SensorNode::new(n.clone(), LocalTransport::new(&broker, n.node_id.clone()), Arc::new(clock.clone()))
            .map_err(CliError::runtime)?
            .with_log(Box::new(log));
        nodes.push(node);
    }
    let targets = cfg.feed_targets();
    let mut sim = Simulator::new(sc.clone(), cfg.feeds()).map_err(CliError::config)?;
    if let Some(f) = &opts.on_ready {
        f(admin.as_ref().map(|a| a.local_addr()));
    }

    let lag = cfg.max_period_us() + TICK_US + 50_000;
    let settle = Duration::from_secs(30);
    let mut labels = Vec::new();
    let mut ticks = 0u64;
    let t0 = Instant::now();
    while !sim.finished() {
        broker.barrier().map_err(CliError::runtime)?;
        machine.drain_commands(&mut sim)?;
        let step = sim.step(TICK_US);
        let now = sim.now_us();
        clock.set(now);
        machine.after_step(&sim, &step)?;
        labels.extend_from_slice(&step.labels);
        let mut batches: Vec<SourceBatch> = nodes
            .iter()
            .map(|_| SourceBatch {
                now_us: now,
                channels: Vec::new(),
            })
            .collect();
        for ((ni, ch), samples) in targets.iter().zip(step.samples) {
            let s = samples.into_iter().map(|s| Sample { t_us: s.t_us, value: s.value }).collect();
            batches[*ni].channels.push((ch.clone(), s));
        }
        for (node, b) in nodes.iter_mut().zip(&batches) {
            node.tick(b).map_err(|e| CliError::Runtime(format!("{}: {e}", node.node_id())))?;
        }
        broker.barrier().map_err(CliError::runtime)?;
        if !pipeline.wait_quiescent(settle) {
            return Err(CliError::Runtime("gateway did not settle".into()));
        }
        pipeline.watermark(now - lag).map_err(CliError::runtime)?;
        if !pipeline.wait_quiescent(settle) {
            return Err(CliError::Runtime("gateway did not settle".into()));
        }
        ticks += 1;
        if opts.realtime {
            let due = t0 + Duration::from_micros((ticks as i64 * TICK_US) as u64);
            if let Some(d) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(d);
            }
        }
    }

    // Shutdown order: nodes, then the gateway, then the uplink.
    let mut node_stats = BTreeMap::new();
    for n in nodes {
        node_stats.insert(n.node_id().to_owned(), n.stats().clone());
    }
    machine.finish()?;
    broker.barrier().map_err(CliError::runtime)?;
    pipeline.wait_quiescent(settle);
    if let Some(a) = admin {
        a.stop();
    }
    let pipeline = Arc::try_unwrap(pipeline).map_err(|_| CliError::Runtime("pipeline still shared".into()))?;
    let report = pipeline.stop();
    responder.stop();

    let mut lw = create(&out.join("labels.ndjson"))?;
    for l in &labels {
        serde_json::to_writer(&mut lw, l).map_err(CliError::runtime)?;
        lw.write_all(b"\n")?;
    }
    lw.flush()?;
    if let Some(url) = &sink_url {
        let transport: Box<dyn BatchTransport> = match &opts.cloud_transport {
            Some(f) => f(),
            None => Box::new(HttpTransport::new(url)),
        };
        let mut up = Uploader::new(transport);
        for chunk in label_lines(&labels, &session).chunks(500) {
            up.send_lines(chunk).map_err(|e| CliError::Runtime(format!("label upload: {e}")))?;
        }
    }
    if let Some(s) = sink {
        s.stop();
    }
    broker.shutdown();

    write_json(&out.join("pipeline.json"), &pipeline_json(&report))?;
    write_json(&out.join("node_stats.json"), &node_stats)?;
    let manifest = Manifest {
        session,
        scenario: sc.name.clone(),
        seed: sc.seed,
        duration_s: sc.duration_s,
        mode: cfg.mode.map(|m| m.as_u8()),
        tick_us: TICK_US,
        watermark_lag_us: lag,
        nodes: cfg.nodes.iter().map(|n| n.node_id.clone()).collect(),
        stages: cfg.graph.doc.stages.iter().map(|s| format!("{}:{}", s.id, s.kind)).collect(),
        model_version,
        ticks,
    };
    write_json(&out.join("run.json"), &manifest)?;
    let rep = build_report(out)?;
    write_json(&out.join("report.json"), &rep)?;
    Ok(RunOutcome {
        report: rep,
        pipeline: report,
        node_stats,
    })
}

pub fn pipeline_json(r: &PipelineReport) -> serde_json::Value {
    let stages: BTreeMap<&str, serde_json::Value> = r
        .stages
        .iter()
        .map(|(id, s)| {
            (
                id.as_str(),
                json!({
                    "records_in": s.records_in,
                    "records_out": s.records_out,
                    "dropped": s.dropped,
                    "dead_lettered": s.dead_lettered,
                }),
            )
        })
        .collect();
    json!({
        "consumed": r.consumed,
        "emitted": r.emitted,
        "dropped": r.dropped,
        "dead_lettered": r.dead_lettered,
        "conserved": r.conserved(),
        "stages": stages,
    })
}
