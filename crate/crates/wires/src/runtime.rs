//! Runs a validated graph: one thread per stage, bounded FIFO queues as edges.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, select, Receiver, Sender};
use dsm_broker::{Delivery, LocalClient, LocalOptions, QoS};
use serde::{Deserialize, Serialize};

use crate::graph::{GraphSpec, Violation};
use crate::record::WireRecord;
use crate::registry::{BuildContext, Registry};
use crate::stage::{Control, ControlReply, Outbox, Stage};

const QUEUE_DEPTH: usize = 1024;

#[derive(Debug, thiserror::Error)]
pub enum WiresError {
    #[error("invalid graph: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("stage {stage} failed to start: {reason}")]
    StartupFailure { stage: String, reason: String },
    #[error("no stage {0}")]
    UnknownStage(String),
    #[error("pipeline stopped")]
    Stopped,
}

enum Msg {
    Record { port: usize, rec: WireRecord },
    Delivery(Delivery),
    /// From the incoming edge with this local index.
    Watermark { edge: usize, w: i64 },
    Close { edge: usize },
    /// Injected at sources only.
    SourceWatermark(i64),
    Stop,
    Control(Control, Sender<ControlReply>),
}

#[derive(Debug, Default)]
struct Totals {
    consumed: AtomicU64,
    emitted: AtomicU64,
    dropped: AtomicU64,
    dead_lettered: AtomicU64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    pub records_in: u64,
    pub records_out: u64,
    pub dropped: u64,
    pub dead_lettered: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub consumed: u64,
    pub emitted: u64,
    pub dropped: u64,
    pub dead_lettered: u64,
    pub stages: BTreeMap<String, StageStats>,
}

impl PipelineReport {
    /// `consumed = emitted + dropped + dead-lettered`.
    pub fn conserved(&self) -> bool {
        self.consumed == self.emitted + self.dropped + self.dead_lettered
    }
}

struct Target {
    tx: Sender<Msg>,
    /// Index of this edge among the target's incoming edges.
    edge: usize,
    edge_port: usize,
}

struct Worker {
    id: String,
    stage: Box<dyn Stage>,
    inbox: Receiver<Msg>,
    deliveries: Option<(LocalClient, Receiver<Delivery>)>,
    /// Input port of each incoming edge.
    incoming: Vec<usize>,
    n_inputs: usize,
    outgoing: Vec<Vec<Target>>,
    in_flight: Arc<AtomicI64>,
    totals: Arc<Totals>,
    stats: StageStats,
}

impl Worker {
    fn send(&self, t: &Target, m: Msg) {
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        if t.tx.send(m).is_err() {
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
        }
    }

    fn route(&mut self, out: Outbox) {
        self.stats.dropped += out.dropped;
        self.stats.dead_lettered += out.dead_lettered;
        self.totals.dropped.fetch_add(out.dropped, Ordering::SeqCst);
        self.totals.dead_lettered.fetch_add(out.dead_lettered, Ordering::SeqCst);
        for (port, mut rec) in out.records {
            self.stats.records_out += 1;
            let targets = &self.outgoing[port];
            if targets.is_empty() {
                self.totals.emitted.fetch_add(rec.weight, Ordering::SeqCst);
                continue;
            }
            // Weight travels on the first edge only so fan-out is not double counted.
            let weight = std::mem::take(&mut rec.weight);
            let n = targets.len();
            for (k, t) in targets.iter().enumerate() {
                let mut r = if k + 1 == n {
                    std::mem::take(&mut rec)
                } else {
                    rec.clone()
                };
                r.weight = if k == 0 { weight } else { 0 };
                self.send(t, Msg::Record { port: t.edge_port, rec: r });
            }
        }
    }

    fn forward_watermark(&self, w: i64) {
        for port in &self.outgoing {
            for t in port {
                self.send(t, Msg::Watermark { edge: t.edge, w });
            }
        }
    }

    fn close_outputs(&self) {
        for port in &self.outgoing {
            for t in port {
                self.send(t, Msg::Close { edge: t.edge });
            }
        }
    }

    fn handle_delivery(&mut self, d: Delivery) {
        self.totals.consumed.fetch_add(1, Ordering::SeqCst);
        self.stats.records_in += 1;
        let mut out = Outbox::default();
        self.stage.on_delivery(d, &mut out);
        self.route(out);
    }

    fn drain_deliveries(&mut self) {
        loop {
            let d = match &self.deliveries {
                Some((_, rx)) => rx.try_recv().ok(),
                None => None,
            };
            let Some(d) = d else { break };
            self.handle_delivery(d);
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
        }
    }

    fn run(mut self) -> (String, StageStats) {
        let mut edge_wm = vec![i64::MIN; self.incoming.len()];
        let mut edge_open = vec![true; self.incoming.len()];
        let mut last_wm = i64::MIN;
        let never = crossbeam_channel::never();
        loop {
            let drx = self.deliveries.as_ref().map(|(_, rx)| rx.clone());
            let msg = select! {
                recv(self.inbox) -> m => match m {
                    Ok(m) => m,
                    Err(_) => break,
                },
                recv(drx.as_ref().unwrap_or(&never)) -> d => match d {
                    Ok(d) => Msg::Delivery(d),
                    Err(_) => {
                        self.deliveries = None;
                        continue;
                    }
                },
            };
            let mut stop = false;
            match msg {
                Msg::Record { port, rec } => {
                    self.stats.records_in += 1;
                    if self.outgoing.is_empty() {
                        self.totals.emitted.fetch_add(rec.weight, Ordering::SeqCst);
                    }
                    let mut out = Outbox::default();
                    self.stage.on_record(port, rec, &mut out);
                    self.route(out);
                }
                Msg::Delivery(d) => self.handle_delivery(d),
                Msg::SourceWatermark(w) => {
                    self.drain_deliveries();
                    if w > last_wm {
                        last_wm = w;
                        let mut out = Outbox::default();
                        self.stage.on_watermark(w, &mut out);
                        self.route(out);
                        self.forward_watermark(w);
                    }
                }
                Msg::Watermark { edge, w } => {
                    edge_wm[edge] = edge_wm[edge].max(w);
                    let min = (0..edge_wm.len())
                        .filter(|&e| edge_open[e])
                        .map(|e| edge_wm[e])
                        .min()
                        .unwrap_or(i64::MAX);
                    if min > last_wm && min != i64::MAX {
                        last_wm = min;
                        let mut out = Outbox::default();
                        self.stage.on_watermark(min, &mut out);
                        self.route(out);
                        self.forward_watermark(min);
                    }
                }
                Msg::Close { edge } => {
                    edge_open[edge] = false;
                    let port = self.incoming[edge];
                    let mut out = Outbox::default();
                    if !(0..self.incoming.len()).any(|e| edge_open[e] && self.incoming[e] == port) {
                        self.stage.on_input_closed(port, &mut out);
                    }
                    if edge_open.iter().all(|o| !o) {
                        self.stage.finish(&mut out);
                        stop = true;
                    }
                    self.route(out);
                }
                Msg::Stop => {
                    self.drain_deliveries();
                    let mut out = Outbox::default();
                    for p in 0..self.n_inputs {
                        self.stage.on_input_closed(p, &mut out);
                    }
                    self.stage.finish(&mut out);
                    self.route(out);
                    stop = true;
                }
                Msg::Control(c, reply) => {
                    let _ = reply.send(self.stage.control(&c));
                }
            }
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            if stop {
                self.close_outputs();
                break;
            }
        }
        if let Some((client, _)) = self.deliveries.take() {
            drop(client);
        }
        (self.id, self.stats)
    }
}

struct Handle {
    id: String,
    tx: Sender<Msg>,
    is_source: bool,
    describe: serde_json::Value,
}

/// A running graph.
pub struct Pipeline {
    handles: Vec<Handle>,
    threads: Vec<JoinHandle<(String, StageStats)>>,
    in_flight: Arc<AtomicI64>,
    totals: Arc<Totals>,
}

impl Pipeline {
    /// Builds every stage first, so a failing stage aborts startup before
    /// any subscription exists or any record flows.
    pub fn start(spec: &GraphSpec, registry: &Registry, ctx: &BuildContext) -> Result<Pipeline, WiresError> {
        let n = spec.doc.stages.len();
        let mut stages = Vec::with_capacity(n);
        for s in &spec.doc.stages {
            let f = registry
                .get(&s.kind)
                .ok_or_else(|| WiresError::StartupFailure {
                    stage: s.id.clone(),
                    reason: format!("unknown kind {}", s.kind),
                })?;
            let st = f.build(&s.id, &s.params, ctx).map_err(|reason| WiresError::StartupFailure {
                stage: s.id.clone(),
                reason,
            })?;
            stages.push(st);
        }
        let in_flight = Arc::new(AtomicI64::new(0));
        let totals = Arc::new(Totals::default());
        let chans: Vec<(Sender<Msg>, Receiver<Msg>)> = (0..n).map(|_| bounded(QUEUE_DEPTH)).collect();
        let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut outgoing: Vec<Vec<Vec<Target>>> = spec
            .ports
            .iter()
            .map(|p| (0..p.outputs.len()).map(|_| Vec::new()).collect())
            .collect();
        for e in &spec.edges {
            incoming[e.to].push(e.to_port);
            outgoing[e.from][e.from_port].push(Target {
                tx: chans[e.to].0.clone(),
                edge: incoming[e.to].len() - 1,
                edge_port: e.to_port,
            });
        }
        let mut subs = Vec::with_capacity(n);
        for (i, st) in stages.iter().enumerate() {
            let sub = match (st.subscription(), &ctx.broker) {
                (Some(filter), Some(broker)) => {
                    let opts = LocalOptions {
                        queue_capacity: 4096,
                        auto_ack: true,
                        pending: Some(in_flight.clone()),
                    };
                    let id = &spec.doc.stages[i].id;
                    let client = broker
                        .local_client(&format!("wires-{}-{id}", ctx.session), opts)
                        .map_err(|e| WiresError::StartupFailure {
                            stage: id.clone(),
                            reason: e.to_string(),
                        })?;
                    client.subscribe(&filter, QoS::AtLeastOnce).map_err(|e| {
                        WiresError::StartupFailure {
                            stage: id.clone(),
                            reason: e.to_string(),
                        }
                    })?;
                    let rx = client.receiver().clone();
                    Some((client, rx))
                }
                _ => None,
            };
            subs.push(sub);
        }
        let mut handles = Vec::with_capacity(n);
        let mut threads = Vec::with_capacity(n);
        let mut outgoing = outgoing.drain(..);
        for (i, ((stage, (tx, rx)), deliveries)) in stages.into_iter().zip(chans).zip(subs).enumerate() {
            let id = spec.doc.stages[i].id.clone();
            handles.push(Handle {
                id: id.clone(),
                tx,
                is_source: spec.ports[i].inputs.is_empty(),
                describe: stage.describe(),
            });
            let w = Worker {
                id: id.clone(),
                stage,
                inbox: rx,
                deliveries,
                incoming: incoming[i].clone(),
                n_inputs: spec.ports[i].inputs.len(),
                outgoing: outgoing.next().expect("one per stage"),
                in_flight: in_flight.clone(),
                totals: totals.clone(),
                stats: StageStats::default(),
            };
            let t = std::thread::Builder::new()
                .name(format!("stage-{id}"))
                .spawn(move || w.run())
                .map_err(|e| WiresError::StartupFailure {
                    stage: id,
                    reason: e.to_string(),
                })?;
            threads.push(t);
        }
        Ok(Pipeline {
            handles,
            threads,
            in_flight,
            totals,
        })
    }

    fn handle(&self, id: &str) -> Result<&Handle, WiresError> {
        self.handles
            .iter()
            .find(|h| h.id == id)
            .ok_or_else(|| WiresError::UnknownStage(id.to_owned()))
    }

    fn send(&self, h: &Handle, m: Msg) -> Result<(), WiresError> {
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        h.tx.send(m).map_err(|_| {
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            WiresError::Stopped
        })
    }

    /// Feeds a record into input port 0 of a stage, counting it as consumed.
    pub fn inject(&self, stage: &str, rec: WireRecord) -> Result<(), WiresError> {
        let h = self.handle(stage)?;
        self.totals.consumed.fetch_add(rec.weight, Ordering::SeqCst);
        self.send(h, Msg::Record { port: 0, rec })
    }

    /// Hands a broker delivery to a source stage directly.
    pub fn inject_delivery(&self, stage: &str, d: Delivery) -> Result<(), WiresError> {
        let h = self.handle(stage)?;
        self.send(h, Msg::Delivery(d))
    }

    /// Declares that every input up to event time `w` has been published.
    pub fn watermark(&self, w: i64) -> Result<(), WiresError> {
        for h in self.handles.iter().filter(|h| h.is_source) {
            self.send(h, Msg::SourceWatermark(w))?;
        }
        Ok(())
    }

    /// Waits until no message is queued or being processed anywhere.
    pub fn wait_quiescent(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut spins = 0u32;
        while self.in_flight.load(Ordering::SeqCst) > 0 {
            if Instant::now() >= deadline {
                return false;
            }
            spins += 1;
            if spins < 200 {
                std::thread::yield_now();
            } else {
                std::thread::sleep(Duration::from_micros(100));
            }
        }
        true
    }

    pub fn control(&self, stage: &str, c: Control) -> Result<ControlReply, WiresError> {
        let h = self.handle(stage)?;
        let (tx, rx) = bounded(1);
        self.send(h, Msg::Control(c, tx))?;
        rx.recv().map_err(|_| WiresError::Stopped)
    }

    pub fn describe(&self, stage: &str) -> Result<serde_json::Value, WiresError> {
        Ok(self.handle(stage)?.describe.clone())
    }

    pub fn stage_ids(&self) -> impl Iterator<Item = &str> {
        self.handles.iter().map(|h| h.id.as_str())
    }

    /// Closes the sources and waits for every stage to flush and exit.
    pub fn stop(self) -> PipelineReport {
        for h in self.handles.iter().filter(|h| h.is_source) {
            let _ = self.send(h, Msg::Stop);
        }
        let mut stages = BTreeMap::new();
        for t in self.threads {
            match t.join() {
                Ok((id, s)) => {
                    stages.insert(id, s);
                }
                Err(_) => log::error!("a stage thread panicked"),
            }
        }
        PipelineReport {
            consumed: self.totals.consumed.load(Ordering::SeqCst),
            emitted: self.totals.emitted.load(Ordering::SeqCst),
            dropped: self.totals.dropped.load(Ordering::SeqCst),
            dead_lettered: self.totals.dead_lettered.load(Ordering::SeqCst),
            stages,
        }
    }
}
