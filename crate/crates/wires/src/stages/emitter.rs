//! Terminal stages: cloud uplink, operator WebSocket feed, broker republish.

use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};
use dsm_broker::{Broker, LocalClient, LocalOptions, QoS};
use dsm_cloud::{HttpTransport, Uploader};
use dsm_core::{TopicKind, TopicPath};
use serde::Deserialize;
use serde_json::{json, Value};
use tungstenite::{Message, WebSocket};

use crate::record::{RecordType, WireRecord};
use crate::registry::{parse_params, BuildContext, PortSpec, StageFactory};
use crate::stage::{Outbox, Stage};

/// Node id of the trimming machine's command endpoint.
pub const MACHINE_NODE: &str = "machine";

/// Cloud batches are also flushed when event time advances this far.
const CLOUD_FLUSH_US: i64 = 5_000_000;

#[derive(Debug, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case", deny_unknown_fields)]
enum Params {
    Cloud {
        #[serde(default = "default_batch")]
        batch_size: usize,
    },
    Hmi {
        #[serde(default = "default_bind")]
        bind: String,
        #[serde(default)]
        auto_apply: bool,
    },
    Topic {
        topic: String,
    },
}

fn default_batch() -> usize {
    50
}

fn default_bind() -> String {
    "127.0.0.1:0".into()
}

fn check(params: &Value) -> Result<Params, String> {
    let p: Params = parse_params(params)?;
    match &p {
        Params::Cloud { batch_size: 0 } => return Err("batch_size must be positive".into()),
        Params::Topic { topic } => {
            dsm_broker::TopicFilter::parse(topic).map_err(|e| e.to_string())?;
            if topic.contains(['+', '#']) {
                return Err("topic must not contain wildcards".into());
            }
        }
        _ => {}
    }
    Ok(p)
}

pub struct EmitterFactory;

impl StageFactory for EmitterFactory {
    fn kind(&self) -> &'static str {
        "emitter"
    }

    fn ports(&self, params: &Value) -> Result<PortSpec, String> {
        check(params)?;
        Ok(PortSpec {
            inputs: vec![("in".into(), RecordType::Any)],
            outputs: vec![],
        })
    }

    fn build(&self, id: &str, params: &Value, ctx: &BuildContext) -> Result<Box<dyn Stage>, String> {
        match check(params)? {
            Params::Cloud { batch_size } => {
                let transport = match (&ctx.cloud_transport, &ctx.sink_url) {
                    (Some(f), _) => f(),
                    (None, Some(url)) => Box::new(HttpTransport::new(url)),
                    (None, None) => return Err("no cloud sink configured".into()),
                };
                Ok(Box::new(CloudEmitter {
                    id: id.to_owned(),
                    session: ctx.session.clone(),
                    uploader: Uploader::new(transport),
                    batch: Vec::new(),
                    batch_size,
                    last_flush_t: None,
                    failed_batches: 0,
                }))
            }
            Params::Hmi { bind, auto_apply } => HmiEmitter::start(id, &bind, auto_apply, ctx)
                .map(|h| Box::new(h) as Box<dyn Stage>),
            Params::Topic { topic } => {
                let broker = ctx.broker.as_ref().ok_or("topic emitter needs a broker")?;
                let client = broker
                    .local_client(&format!("wires-{id}"), LocalOptions::default())
                    .map_err(|e| e.to_string())?;
                Ok(Box::new(TopicEmitter { topic, client }))
            }
        }
    }
}

struct CloudEmitter {
    id: String,
    session: String,
    uploader: Uploader,
    batch: Vec<String>,
    batch_size: usize,
    last_flush_t: Option<i64>,
    failed_batches: u64,
}

impl CloudEmitter {
    fn flush(&mut self) {
        if self.batch.is_empty() {
            return;
        }
        if let Err(e) = self.uploader.send_lines(&self.batch) {
            self.failed_batches += 1;
            log::error!("{}: batch of {} records lost: {e}", self.id, self.batch.len());
        }
        self.batch.clear();
    }
}

impl Stage for CloudEmitter {
    fn on_record(&mut self, _port: usize, mut rec: WireRecord, _out: &mut Outbox) {
        rec.samples.clear();
        rec.tags.insert("session".into(), self.session.clone());
        match serde_json::to_string(&rec) {
            Ok(line) => self.batch.push(line),
            Err(e) => log::error!("{}: cannot encode record: {e}", self.id),
        }
        if self.batch.len() >= self.batch_size {
            self.flush();
        }
    }

    fn on_watermark(&mut self, w: i64, _out: &mut Outbox) {
        let last = *self.last_flush_t.get_or_insert(w);
        if w - last >= CLOUD_FLUSH_US {
            self.flush();
            self.last_flush_t = Some(w);
        }
    }

    fn finish(&mut self, _out: &mut Outbox) {
        self.flush();
        log::info!(
            "{}: {} batches acked, {} retries, {} lost",
            self.id,
            self.uploader.batches_acked,
            self.uploader.retries,
            self.failed_batches
        );
    }
}

struct TopicEmitter {
    topic: String,
    client: LocalClient,
}

impl Stage for TopicEmitter {
    fn on_record(&mut self, _port: usize, rec: WireRecord, _out: &mut Outbox) {
        match serde_json::to_vec(&rec) {
            Ok(body) => {
                if let Err(e) = self.client.publish_nowait(&self.topic, body, QoS::AtLeastOnce) {
                    log::error!("republish to {} failed: {e}", self.topic);
                }
            }
            Err(e) => log::error!("cannot encode record: {e}"),
        }
    }
}

#[derive(Debug, Deserialize)]
struct SetParams {
    cmd: String,
    args: SetArgs,
    #[serde(default)]
    req_id: Option<Value>,
}

#[derive(Debug, Deserialize, Clone, Copy, PartialEq)]
struct SetArgs {
    spindle_rpm: f64,
    feed_mm_s: f64,
}

type Peers = Arc<Mutex<Vec<Sender<String>>>>;

/// WebSocket server. Pushes one JSON record per frame, forwards operator
/// `set_params` commands to the machine and relays the machine's replies.
struct HmiEmitter {
    addr: std::net::SocketAddr,
    peers: Peers,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    cmd: Option<Arc<CommandLink>>,
    auto_apply: bool,
    last_applied: Option<SetArgs>,
    auto_seq: u64,
}

struct CommandLink {
    client: Mutex<LocalClient>,
    topic: String,
    forwarded: AtomicU64,
}

impl CommandLink {
    fn forward(&self, body: Vec<u8>) -> Result<(), String> {
        let c = self.client.lock().map_err(|_| "command link poisoned")?;
        c.publish_nowait(&self.topic, body, QoS::AtLeastOnce)
            .map_err(|e| e.to_string())?;
        self.forwarded.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }
}

fn broadcast(peers: &Peers, text: &str) {
    if let Ok(mut p) = peers.lock() {
        p.retain(|tx| tx.send(text.to_owned()).is_ok());
    }
}

impl HmiEmitter {
    fn start(id: &str, bind: &str, auto_apply: bool, ctx: &BuildContext) -> Result<HmiEmitter, String> {
        let listener = TcpListener::bind(bind).map_err(|e| format!("bind {bind}: {e}"))?;
        listener.set_nonblocking(true).map_err(|e| e.to_string())?;
        let addr = listener.local_addr().map_err(|e| e.to_string())?;
        let peers: Peers = Arc::default();
        let stop = Arc::new(AtomicBool::new(false));
        let mut threads = Vec::new();
        let cmd = match &ctx.broker {
            Some(b) => Some(Arc::new(Self::command_link(id, b, &ctx.site)?)),
            None => None,
        };
        if let Some(b) = &ctx.broker {
            threads.push(Self::spawn_ack_relay(id, b, &ctx.site, peers.clone(), stop.clone())?);
        }
        let (p2, s2, c2) = (peers.clone(), stop.clone(), cmd.clone());
        threads.push(
            std::thread::Builder::new()
                .name(format!("hmi-accept-{id}"))
                .spawn(move || accept_loop(listener, p2, s2, c2))
                .map_err(|e| e.to_string())?,
        );
        log::info!("{id}: HMI WebSocket on ws://{addr}");
        Ok(HmiEmitter {
            addr,
            peers,
            stop,
            threads,
            cmd,
            auto_apply,
            last_applied: None,
            auto_seq: 0,
        })
    }

    fn command_link(id: &str, broker: &Broker, site: &str) -> Result<CommandLink, String> {
        let topic = TopicPath::node(site, MACHINE_NODE, TopicKind::Cmd)
            .map_err(|e| e.to_string())?
            .render();
        let client = broker
            .local_client(&format!("wires-{id}-cmd"), LocalOptions::default())
            .map_err(|e| e.to_string())?;
        Ok(CommandLink {
            client: Mutex::new(client),
            topic,
            forwarded: AtomicU64::new(0),
        })
    }

    fn spawn_ack_relay(
        id: &str,
        broker: &Broker,
        site: &str,
        peers: Peers,
        stop: Arc<AtomicBool>,
    ) -> Result<JoinHandle<()>, String> {
        let events = TopicPath::node(site, MACHINE_NODE, TopicKind::Events)
            .map_err(|e| e.to_string())?
            .render();
        let client = broker
            .local_client(&format!("wires-{id}-acks"), LocalOptions::default())
            .map_err(|e| e.to_string())?;
        client.subscribe(&events, QoS::AtLeastOnce).map_err(|e| e.to_string())?;
        std::thread::Builder::new()
            .name(format!("hmi-acks-{id}"))
            .spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    if let Some(d) = client.recv_timeout(Duration::from_millis(20)) {
                        match String::from_utf8(d.payload) {
                            Ok(text) => broadcast(&peers, &text),
                            Err(_) => log::warn!("non-UTF-8 machine event dropped"),
                        }
                    }
                }
            })
            .map_err(|e| e.to_string())
    }
}

impl Stage for HmiEmitter {
    fn on_record(&mut self, _port: usize, rec: WireRecord, _out: &mut Outbox) {
        if let Ok(text) = serde_json::to_string(&rec) {
            broadcast(&self.peers, &text);
        }
        if !self.auto_apply {
            return;
        }
        let (Some(&rpm), Some(&feed)) = (rec.values.get("rec_spindle_rpm"), rec.values.get("rec_feed_mm_s")) else {
            return;
        };
        let args = SetArgs {
            spindle_rpm: rpm,
            feed_mm_s: feed,
        };
        if self.last_applied == Some(args) {
            return;
        }
        let Some(link) = &self.cmd else { return };
        self.auto_seq += 1;
        let body = json!({
            "cmd": "set_params",
            "args": {"spindle_rpm": rpm, "feed_mm_s": feed},
            "req_id": format!("auto-{}", self.auto_seq),
        });
        match link.forward(body.to_string().into_bytes()) {
            Ok(()) => self.last_applied = Some(args),
            Err(e) => log::error!("auto-apply failed: {e}"),
        }
    }

    fn finish(&mut self, _out: &mut Outbox) {
        self.stop.store(true, Ordering::SeqCst);
        // Dropping the senders lets client threads flush and close.
        if let Ok(mut p) = self.peers.lock() {
            p.clear();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    fn describe(&self) -> Value {
        json!({ "ws_addr": self.addr.to_string() })
    }
}

impl Drop for HmiEmitter {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

fn accept_loop(listener: TcpListener, peers: Peers, stop: Arc<AtomicBool>, cmd: Option<Arc<CommandLink>>) {
    let mut clients = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let (tx, rx) = unbounded();
                // Registered before the handshake so no frame emitted after
                // the connection was accepted is missed.
                if let Ok(mut p) = peers.lock() {
                    p.push(tx);
                }
                let (s2, c2) = (stop.clone(), cmd.clone());
                match std::thread::Builder::new()
                    .name(format!("hmi-{peer}"))
                    .spawn(move || serve_client(stream, rx, s2, c2))
                {
                    Ok(h) => clients.push(h),
                    Err(e) => log::error!("cannot serve {peer}: {e}"),
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::error!("accept failed: {e}");
                std::thread::sleep(Duration::from_millis(50));
            }
        }
    }
    for h in clients {
        let _ = h.join();
    }
}

fn reply(req_id: Option<Value>, ok: bool, reason: Option<String>) -> String {
    json!({"type": "cmd_reply", "req_id": req_id, "ok": ok, "reason": reason}).to_string()
}

/// Validates an inbound frame and forwards it verbatim to the machine.
fn handle_command(text: &str, cmd: Option<&CommandLink>) -> Option<String> {
    let parsed: SetParams = match serde_json::from_str(text) {
        Ok(p) => p,
        Err(e) => return Some(reply(None, false, Some(format!("bad command: {e}")))),
    };
    if parsed.cmd != "set_params" {
        return Some(reply(parsed.req_id, false, Some(format!("unknown cmd {}", parsed.cmd))));
    }
    if !(parsed.args.spindle_rpm.is_finite() && parsed.args.feed_mm_s.is_finite()) {
        return Some(reply(parsed.req_id, false, Some("non-finite argument".into())));
    }
    let Some(link) = cmd else {
        return Some(reply(parsed.req_id, false, Some("no machine link".into())));
    };
    match link.forward(text.as_bytes().to_vec()) {
        // The machine's own ack arrives through the event relay.
        Ok(()) => None,
        Err(e) => Some(reply(parsed.req_id, false, Some(e))),
    }
}

fn serve_client(stream: TcpStream, outbound: Receiver<String>, stop: Arc<AtomicBool>, cmd: Option<Arc<CommandLink>>) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let mut ws: WebSocket<TcpStream> = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("WebSocket handshake failed: {e}");
            return;
        }
    };
    let _ = ws.get_ref().set_read_timeout(Some(Duration::from_millis(10)));
    loop {
        match ws.read() {
            Ok(Message::Text(t)) => {
                if let Some(r) = handle_command(t.as_str(), cmd.as_deref()) {
                    let _ = ws.send(Message::text(r));
                }
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
        let mut closed = false;
        loop {
            match outbound.try_recv() {
                Ok(text) => {
                    if ws.send(Message::text(text)).is_err() {
                        return;
                    }
                }
                Err(crossbeam_channel::TryRecvError::Empty) => break,
                Err(crossbeam_channel::TryRecvError::Disconnected) => {
                    closed = true;
                    break;
                }
            }
        }
        if closed || stop.load(Ordering::SeqCst) && outbound.is_empty() {
            let _ = ws.close(None);
            let _ = ws.flush();
            break;
        }
    }
}
