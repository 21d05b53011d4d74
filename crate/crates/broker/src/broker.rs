//! The routing core: one thread owns all session state and processes
//! connection events strictly in arrival order.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};

use crate::codec::{
    Packet, Publish, QoS, CONNACK_ACCEPTED, CONNACK_ID_REJECTED, MAX_PAYLOAD, SUBACK_FAILURE,
};
use crate::filter::{validate_topic_name, FilterError, TopicFilter};
use crate::metrics::{inc, Metrics};

pub type ConnId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub topic: String,
    pub payload: Vec<u8>,
    pub qos: QoS,
    pub dup: bool,
    /// Set for QoS 1 deliveries that expect an acknowledgement.
    pub packet_id: Option<u16>,
}

#[derive(Debug, thiserror::Error)]
pub enum BrokerError {
    #[error("broker is not running")]
    Closed,
    #[error("invalid topic: {0}")]
    InvalidTopic(#[from] FilterError),
    #[error("payload of {0} bytes exceeds limit")]
    PayloadTooLarge(usize),
    #[error("connection refused with code {0}")]
    Refused(u8),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol: {0}")]
    Codec(#[from] crate::codec::CodecError),
}

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    /// Unacknowledged QoS 1 deliveries older than this are resent.
    pub redeliver_after: Duration,
    /// Redelivery attempts tolerated before the session is evicted.
    pub max_redeliveries: u32,
    /// How often the background ticker checks for expired deliveries;
    /// `None` leaves redelivery to explicit [`Broker::redeliver_expired`] calls.
    pub redeliver_tick: Option<Duration>,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            redeliver_after: Duration::from_secs(2),
            max_redeliveries: 5,
            redeliver_tick: Some(Duration::from_millis(250)),
        }
    }
}

pub(crate) enum Outbound {
    Packet(Packet),
    /// Shut the socket down, then signal on the sender if present.
    Close(Option<Sender<()>>),
}

pub(crate) enum Sink {
    Tcp(Sender<Outbound>),
    Local {
        tx: Sender<Delivery>,
        auto_ack: bool,
        pending: Option<Arc<AtomicI64>>,
    },
}

pub(crate) enum CoreMsg {
    Connect {
        conn: ConnId,
        client_id: String,
        clean_session: bool,
        sink: Sink,
        reply: Sender<Result<String, u8>>,
    },
    Publish {
        conn: ConnId,
        publish: Publish,
        reply: Option<Sender<()>>,
    },
    PubAck {
        conn: ConnId,
        packet_id: u16,
    },
    Subscribe {
        conn: ConnId,
        packet_id: u16,
        filters: Vec<(String, u8)>,
        reply: Option<Sender<Vec<u8>>>,
    },
    Unsubscribe {
        conn: ConnId,
        packet_id: u16,
        filters: Vec<String>,
        reply: Option<Sender<()>>,
    },
    Ping {
        conn: ConnId,
        reply: Option<Sender<()>>,
    },
    Disconnect {
        conn: ConnId,
    },
    Barrier(Sender<()>),
    Redeliver {
        min_age: Duration,
        reply: Option<Sender<usize>>,
    },
    SessionCount(Sender<usize>),
    Shutdown,
}

struct Inflight {
    publish: Publish,
    last_sent: Instant,
    redeliveries: u32,
}

struct Session {
    conn: ConnId,
    subs: Vec<(TopicFilter, QoS)>,
    inflight: BTreeMap<u16, Inflight>,
    next_pid: u16,
    sink: Sink,
    #[allow(dead_code)]
    connected_at: Instant,
}

impl Session {
    fn allocate_pid(&mut self) -> u16 {
        loop {
            self.next_pid = self.next_pid.wrapping_add(1);
            if self.next_pid != 0 && !self.inflight.contains_key(&self.next_pid) {
                return self.next_pid;
            }
        }
    }

    fn max_qos(&self, topic: &str) -> Option<QoS> {
        self.subs
            .iter()
            .filter(|(f, _)| f.matches(topic))
            .map(|(_, q)| *q)
            .max()
    }

    /// Returns false when the receiving side is gone.
    fn send(&self, d: Delivery) -> bool {
        match &self.sink {
            Sink::Tcp(tx) => tx
                .send(Outbound::Packet(Packet::Publish(Publish {
                    dup: d.dup,
                    qos: d.qos,
                    retain: false,
                    topic: d.topic,
                    packet_id: d.packet_id,
                    payload: d.payload,
                })))
                .is_ok(),
            Sink::Local { tx, pending, .. } => {
                if let Some(p) = pending {
                    p.fetch_add(1, Ordering::SeqCst);
                }
                let ok = tx.send(d).is_ok();
                if !ok {
                    if let Some(p) = pending {
                        p.fetch_sub(1, Ordering::SeqCst);
                    }
                }
                ok
            }
        }
    }

    fn send_packet(&self, p: Packet) {
        if let Sink::Tcp(tx) = &self.sink {
            let _ = tx.send(Outbound::Packet(p));
        }
    }

    fn tracks_acks(&self) -> bool {
        match &self.sink {
            Sink::Tcp(_) => true,
            Sink::Local { auto_ack, .. } => !auto_ack,
        }
    }

    fn close(self) {
        if let Sink::Tcp(tx) = &self.sink {
            let (done_tx, done_rx) = bounded(1);
            if tx.send(Outbound::Close(Some(done_tx))).is_ok() {
                let _ = done_rx.recv_timeout(Duration::from_secs(2));
            }
        }
    }
}

struct Core {
    config: BrokerConfig,
    metrics: Arc<Metrics>,
    sessions: BTreeMap<String, Session>,
    conns: HashMap<ConnId, String>,
    auto_ids: u64,
}

impl Core {
    fn session_mut(&mut self, conn: ConnId) -> Option<&mut Session> {
        let id = self.conns.get(&conn)?;
        self.sessions.get_mut(id).filter(|s| s.conn == conn)
    }

    fn remove_conn(&mut self, conn: ConnId) -> Option<Session> {
        let id = self.conns.remove(&conn)?;
        if self.sessions.get(&id).is_some_and(|s| s.conn == conn) {
            self.metrics.connections_open.fetch_sub(1, Ordering::Relaxed);
            self.sessions.remove(&id)
        } else {
            None
        }
    }

    fn evict(&mut self, client_id: &str) {
        if let Some(old) = self.sessions.remove(client_id) {
            self.conns.remove(&old.conn);
            self.metrics.connections_open.fetch_sub(1, Ordering::Relaxed);
            inc(&self.metrics.evictions);
            old.close();
        }
    }

    fn handle(&mut self, msg: CoreMsg) -> bool {
        match msg {
            CoreMsg::Connect {
                conn,
                mut client_id,
                clean_session,
                sink,
                reply,
            } => {
                if client_id.is_empty() {
                    if !clean_session {
                        if let Sink::Tcp(tx) = &sink {
                            let _ = tx.send(Outbound::Packet(Packet::ConnAck {
                                session_present: false,
                                code: CONNACK_ID_REJECTED,
                            }));
                            let _ = tx.send(Outbound::Close(None));
                        }
                        let _ = reply.send(Err(CONNACK_ID_REJECTED));
                        return true;
                    }
                    self.auto_ids += 1;
                    client_id = format!("auto-{}", self.auto_ids);
                }
                // The old connection is fully closed before the new one is acknowledged.
                self.evict(&client_id);
                let session = Session {
                    conn,
                    subs: Vec::new(),
                    inflight: BTreeMap::new(),
                    next_pid: 0,
                    sink,
                    connected_at: Instant::now(),
                };
                session.send_packet(Packet::ConnAck {
                    session_present: false,
                    code: CONNACK_ACCEPTED,
                });
                self.sessions.insert(client_id.clone(), session);
                self.conns.insert(conn, client_id.clone());
                inc(&self.metrics.connections_total);
                inc(&self.metrics.connections_open);
                let _ = reply.send(Ok(client_id));
            }
            CoreMsg::Publish {
                conn,
                publish,
                reply,
            } => {
                if !self.conns.contains_key(&conn) {
                    return true;
                }
                inc(&self.metrics.publishes_received);
                self.route(&publish);
                if publish.qos == QoS::AtLeastOnce {
                    if let Some(pid) = publish.packet_id {
                        if let Some(s) = self.session_mut(conn) {
                            s.send_packet(Packet::PubAck { packet_id: pid });
                        }
                    }
                }
                if let Some(r) = reply {
                    let _ = r.send(());
                }
            }
            CoreMsg::PubAck { conn, packet_id } => {
                if let Some(s) = self.session_mut(conn) {
                    s.inflight.remove(&packet_id);
                }
            }
            CoreMsg::Subscribe {
                conn,
                packet_id,
                filters,
                reply,
            } => {
                let Some(s) = self.session_mut(conn) else {
                    return true;
                };
                let mut codes = Vec::with_capacity(filters.len());
                for (f, q) in filters {
                    match TopicFilter::parse(&f) {
                        Ok(filter) => {
                            let granted = if q >= 1 { QoS::AtLeastOnce } else { QoS::AtMostOnce };
                            if let Some(slot) = s.subs.iter_mut().find(|(x, _)| *x == filter) {
                                slot.1 = granted;
                            } else {
                                s.subs.push((filter, granted));
                            }
                            codes.push(granted as u8);
                        }
                        Err(_) => codes.push(SUBACK_FAILURE),
                    }
                }
                match reply {
                    Some(r) => {
                        let _ = r.send(codes);
                    }
                    None => s.send_packet(Packet::SubAck { packet_id, codes }),
                }
            }
            CoreMsg::Unsubscribe {
                conn,
                packet_id,
                filters,
                reply,
            } => {
                let Some(s) = self.session_mut(conn) else {
                    return true;
                };
                s.subs.retain(|(f, _)| !filters.iter().any(|x| x == f.as_str()));
                match reply {
                    Some(r) => {
                        let _ = r.send(());
                    }
                    None => s.send_packet(Packet::UnsubAck { packet_id }),
                }
            }
            CoreMsg::Ping { conn, reply } => match reply {
                Some(r) => {
                    let _ = r.send(());
                }
                None => {
                    if let Some(s) = self.session_mut(conn) {
                        s.send_packet(Packet::PingResp);
                    }
                }
            },
            CoreMsg::Disconnect { conn } => {
                if let Some(s) = self.remove_conn(conn) {
                    s.close();
                }
            }
            CoreMsg::Barrier(r) => {
                let _ = r.send(());
            }
            CoreMsg::Redeliver { min_age, reply } => {
                let n = self.redeliver(min_age);
                if let Some(r) = reply {
                    let _ = r.send(n);
                }
            }
            CoreMsg::SessionCount(r) => {
                let _ = r.send(self.sessions.len());
            }
            CoreMsg::Shutdown => {
                let ids: Vec<String> = self.sessions.keys().cloned().collect();
                for id in ids {
                    if let Some(s) = self.sessions.remove(&id) {
                        self.conns.remove(&s.conn);
                        self.metrics.connections_open.fetch_sub(1, Ordering::Relaxed);
                        s.close();
                    }
                }
                return false;
            }
        }
        true
    }

    fn route(&mut self, publish: &Publish) {
        let mut dead = Vec::new();
        for (id, s) in self.sessions.iter_mut() {
            let Some(sub_qos) = s.max_qos(&publish.topic) else {
                continue;
            };
            let qos = sub_qos.min(publish.qos);
            let packet_id = match qos {
                QoS::AtMostOnce => None,
                QoS::AtLeastOnce => Some(s.allocate_pid()),
            };
            let d = Delivery {
                topic: publish.topic.clone(),
                payload: publish.payload.clone(),
                qos,
                dup: false,
                packet_id,
            };
            if let (Some(pid), true) = (packet_id, s.tracks_acks()) {
                s.inflight.insert(
                    pid,
                    Inflight {
                        publish: Publish {
                            dup: false,
                            qos,
                            retain: false,
                            topic: publish.topic.clone(),
                            packet_id,
                            payload: publish.payload.clone(),
                        },
                        last_sent: Instant::now(),
                        redeliveries: 0,
                    },
                );
            }
            if s.send(d) {
                inc(&self.metrics.messages_routed);
            } else {
                dead.push(id.clone());
            }
        }
        for id in dead {
            self.evict(&id);
        }
    }

    fn redeliver(&mut self, min_age: Duration) -> usize {
        let now = Instant::now();
        let mut count = 0;
        let mut evict = Vec::new();
        for (id, s) in self.sessions.iter_mut() {
            let mut resend = Vec::new();
            for (pid, f) in s.inflight.iter_mut() {
                if now.duration_since(f.last_sent) < min_age {
                    continue;
                }
                if f.redeliveries >= self.config.max_redeliveries {
                    evict.push(id.clone());
                    break;
                }
                f.redeliveries += 1;
                f.last_sent = now;
                resend.push(Delivery {
                    topic: f.publish.topic.clone(),
                    payload: f.publish.payload.clone(),
                    qos: f.publish.qos,
                    dup: true,
                    packet_id: Some(*pid),
                });
            }
            if evict.last() == Some(id) {
                continue;
            }
            for d in resend {
                if !s.send(d) {
                    evict.push(id.clone());
                    break;
                }
                inc(&self.metrics.redeliveries);
                count += 1;
            }
        }
        evict.dedup();
        for id in evict {
            log::warn!("evicting session {id} after unacknowledged redeliveries");
            self.evict(&id);
        }
        count
    }
}

/// Cloneable handle to a running broker core.
#[derive(Clone)]
pub struct Broker {
    tx: Sender<CoreMsg>,
    metrics: Arc<Metrics>,
    next_conn: Arc<AtomicU64>,
}

impl Broker {
    pub fn start(config: BrokerConfig) -> Broker {
        let (tx, rx) = unbounded::<CoreMsg>();
        let metrics = Arc::new(Metrics::default());
        let tick = config.redeliver_tick;
        let min_age = config.redeliver_after;
        let mut core = Core {
            config,
            metrics: metrics.clone(),
            sessions: BTreeMap::new(),
            conns: HashMap::new(),
            auto_ids: 0,
        };
        thread::Builder::new()
            .name("broker-core".into())
            .spawn(move || run_core(&mut core, rx))
            .expect("spawn broker core");
        if let Some(period) = tick {
            let tick_tx = tx.clone();
            thread::Builder::new()
                .name("broker-redeliver".into())
                .spawn(move || loop {
                    thread::sleep(period);
                    if tick_tx
                        .send(CoreMsg::Redeliver {
                            min_age,
                            reply: None,
                        })
                        .is_err()
                    {
                        break;
                    }
                })
                .expect("spawn redelivery ticker");
        }
        Broker {
            tx,
            metrics,
            next_conn: Arc::new(AtomicU64::new(1)),
        }
    }

    pub fn metrics(&self) -> &Arc<Metrics> {
        &self.metrics
    }

    pub(crate) fn next_conn_id(&self) -> ConnId {
        self.next_conn.fetch_add(1, Ordering::Relaxed)
    }

    pub(crate) fn send(&self, msg: CoreMsg) -> Result<(), BrokerError> {
        self.tx.send(msg).map_err(|_| BrokerError::Closed)
    }

    /// Returns once every event submitted before this call has been routed.
    pub fn barrier(&self) -> Result<(), BrokerError> {
        let (tx, rx) = bounded(1);
        self.send(CoreMsg::Barrier(tx))?;
        rx.recv().map_err(|_| BrokerError::Closed)
    }

    /// Resends QoS 1 deliveries unacknowledged for at least `min_age`.
    /// Returns the number of redeliveries.
    pub fn redeliver_expired(&self, min_age: Duration) -> Result<usize, BrokerError> {
        let (tx, rx) = bounded(1);
        self.send(CoreMsg::Redeliver {
            min_age,
            reply: Some(tx),
        })?;
        rx.recv().map_err(|_| BrokerError::Closed)
    }

    pub fn session_count(&self) -> Result<usize, BrokerError> {
        let (tx, rx) = bounded(1);
        self.send(CoreMsg::SessionCount(tx))?;
        rx.recv().map_err(|_| BrokerError::Closed)
    }

    pub fn local_client(
        &self,
        client_id: &str,
        opts: LocalOptions,
    ) -> Result<LocalClient, BrokerError> {
        let conn = self.next_conn_id();
        let (dtx, drx) = bounded(opts.queue_capacity.max(1));
        let (rtx, rrx) = bounded(1);
        self.send(CoreMsg::Connect {
            conn,
            client_id: client_id.to_owned(),
            clean_session: true,
            sink: Sink::Local {
                tx: dtx,
                auto_ack: opts.auto_ack,
                pending: opts.pending,
            },
            reply: rtx,
        })?;
        let client_id = rrx
            .recv()
            .map_err(|_| BrokerError::Closed)?
            .map_err(BrokerError::Refused)?;
        Ok(LocalClient {
            broker: self.clone(),
            conn,
            client_id,
            rx: drx,
        })
    }

    pub fn shutdown(&self) {
        let _ = self.tx.send(CoreMsg::Shutdown);
    }
}

fn run_core(core: &mut Core, rx: Receiver<CoreMsg>) {
    while let Ok(msg) = rx.recv() {
        if !core.handle(msg) {
            break;
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalOptions {
    /// Depth of the delivery queue; the broker blocks when it is full.
    pub queue_capacity: usize,
    /// Treat QoS 1 deliveries as acknowledged on enqueue.
    pub auto_ack: bool,
    /// Incremented for each delivery enqueued; the consumer decrements.
    pub pending: Option<Arc<AtomicI64>>,
}

impl Default for LocalOptions {
    fn default() -> Self {
        LocalOptions {
            queue_capacity: 1024,
            auto_ack: true,
            pending: None,
        }
    }
}

/// In-process client. Deliveries arrive on a bounded queue in routing order.
///
/// A client must not block in [`LocalClient::publish`] while its own delivery
/// queue is full; use [`LocalClient::publish_nowait`] from consumers that may
/// fall behind.
pub struct LocalClient {
    broker: Broker,
    conn: ConnId,
    client_id: String,
    rx: Receiver<Delivery>,
}

impl LocalClient {
    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn subscribe(&self, filter: &str, qos: QoS) -> Result<QoS, BrokerError> {
        TopicFilter::parse(filter)?;
        let (tx, rx) = bounded(1);
        self.broker.send(CoreMsg::Subscribe {
            conn: self.conn,
            packet_id: 0,
            filters: vec![(filter.to_owned(), qos as u8)],
            reply: Some(tx),
        })?;
        let codes = rx.recv().map_err(|_| BrokerError::Closed)?;
        QoS::from_u8(codes[0]).ok_or(BrokerError::Refused(codes[0]))
    }

    pub fn unsubscribe(&self, filter: &str) -> Result<(), BrokerError> {
        let (tx, rx) = bounded(1);
        self.broker.send(CoreMsg::Unsubscribe {
            conn: self.conn,
            packet_id: 0,
            filters: vec![filter.to_owned()],
            reply: Some(tx),
        })?;
        rx.recv().map_err(|_| BrokerError::Closed)
    }

    fn make_publish(topic: &str, payload: Vec<u8>, qos: QoS) -> Result<Publish, BrokerError> {
        validate_topic_name(topic)?;
        if payload.len() > MAX_PAYLOAD {
            return Err(BrokerError::PayloadTooLarge(payload.len()));
        }
        Ok(Publish {
            dup: false,
            qos,
            retain: false,
            topic: topic.to_owned(),
            packet_id: (qos == QoS::AtLeastOnce).then_some(1),
            payload,
        })
    }

    /// Publishes and waits until the message has been routed to every
    /// matching subscriber.
    pub fn publish(&self, topic: &str, payload: Vec<u8>, qos: QoS) -> Result<(), BrokerError> {
        let publish = Self::make_publish(topic, payload, qos)?;
        let (tx, rx) = bounded(1);
        self.broker.send(CoreMsg::Publish {
            conn: self.conn,
            publish,
            reply: Some(tx),
        })?;
        rx.recv().map_err(|_| BrokerError::Closed)
    }

    /// Publishes without waiting for routing. Ordering relative to this
    /// client's other publishes is preserved.
    pub fn publish_nowait(
        &self,
        topic: &str,
        payload: Vec<u8>,
        qos: QoS,
    ) -> Result<(), BrokerError> {
        let publish = Self::make_publish(topic, payload, qos)?;
        self.broker.send(CoreMsg::Publish {
            conn: self.conn,
            publish,
            reply: None,
        })
    }

    pub fn ack(&self, packet_id: u16) -> Result<(), BrokerError> {
        self.broker.send(CoreMsg::PubAck {
            conn: self.conn,
            packet_id,
        })
    }

    pub fn receiver(&self) -> &Receiver<Delivery> {
        &self.rx
    }

    pub fn recv_timeout(&self, t: Duration) -> Option<Delivery> {
        self.rx.recv_timeout(t).ok()
    }

    pub fn try_recv(&self) -> Option<Delivery> {
        self.rx.try_recv().ok()
    }
}

impl Drop for LocalClient {
    fn drop(&mut self) {
        let _ = self.broker.send(CoreMsg::Disconnect { conn: self.conn });
    }
}
