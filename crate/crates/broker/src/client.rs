//! Blocking MQTT client used by sensor nodes and the CLI.

use std::collections::{HashMap, VecDeque};
use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};

use crate::broker::{BrokerError, Delivery};
use crate::codec::{read_packet, Connect, Packet, Publish, QoS, CONNACK_ACCEPTED, MAX_PAYLOAD};
use crate::filter::{validate_topic_name, TopicFilter};

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub client_id: String,
    pub keep_alive_s: u16,
    pub timeout: Duration,
    /// Acknowledge QoS 1 deliveries as soon as they are read.
    pub auto_ack: bool,
}

impl ClientOptions {
    pub fn new(client_id: impl Into<String>) -> Self {
        ClientOptions {
            client_id: client_id.into(),
            keep_alive_s: 0,
            timeout: Duration::from_secs(5),
            auto_ack: true,
        }
    }
}

#[derive(Hash, PartialEq, Eq)]
enum AckKey {
    Pub(u16),
    Sub(u16),
    Unsub(u16),
}

#[derive(Default)]
struct Waiters {
    acks: HashMap<AckKey, Sender<Packet>>,
    pings: VecDeque<Sender<()>>,
}

struct Shared {
    writer: Mutex<TcpStream>,
    waiters: Mutex<Waiters>,
    next_pid: Mutex<u16>,
    closed: AtomicBool,
}

impl Shared {
    fn write(&self, p: &Packet) -> Result<(), BrokerError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(BrokerError::Closed);
        }
        let bytes = p.encode();
        let mut w = self.writer.lock().expect("writer lock");
        w.write_all(&bytes)?;
        Ok(())
    }

    fn pid(&self) -> u16 {
        let mut g = self.next_pid.lock().expect("pid lock");
        *g = g.wrapping_add(1);
        if *g == 0 {
            *g = 1;
        }
        *g
    }
}

pub struct MqttClient {
    shared: Arc<Shared>,
    deliveries: Receiver<Delivery>,
    timeout: Duration,
    reader: Option<JoinHandle<()>>,
}

impl MqttClient {
    pub fn connect(addr: impl ToSocketAddrs, opts: ClientOptions) -> Result<Self, BrokerError> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or(BrokerError::Io(std::io::ErrorKind::AddrNotAvailable.into()))?;
        let stream = TcpStream::connect_timeout(&addr, opts.timeout)?;
        stream.set_nodelay(true)?;
        let mut w = stream.try_clone()?;
        w.write_all(
            &Packet::Connect(Connect {
                client_id: opts.client_id.clone(),
                keep_alive: opts.keep_alive_s,
                clean_session: true,
                username: None,
                password: None,
            })
            .encode(),
        )?;
        stream.set_read_timeout(Some(opts.timeout))?;
        let mut reader = BufReader::new(stream.try_clone()?);
        match read_packet(&mut reader)? {
            (Packet::ConnAck { code, .. }, _) if code == CONNACK_ACCEPTED => {}
            (Packet::ConnAck { code, .. }, _) => return Err(BrokerError::Refused(code)),
            _ => return Err(BrokerError::Codec(crate::codec::CodecError::Protocol("expected CONNACK"))),
        }
        stream.set_read_timeout(None)?;
        let shared = Arc::new(Shared {
            writer: Mutex::new(w),
            waiters: Mutex::new(Waiters::default()),
            next_pid: Mutex::new(0),
            closed: AtomicBool::new(false),
        });
        let (dtx, drx) = unbounded();
        let s2 = shared.clone();
        let auto_ack = opts.auto_ack;
        let reader = thread::Builder::new()
            .name(format!("mqtt-{}", opts.client_id))
            .spawn(move || reader_loop(reader, s2, dtx, auto_ack))?;
        Ok(MqttClient {
            shared,
            deliveries: drx,
            timeout: opts.timeout,
            reader: Some(reader),
        })
    }

    fn wait_ack(&self, key: AckKey, packet: &Packet, what: &'static str) -> Result<Packet, BrokerError> {
        let (tx, rx) = bounded(1);
        self.shared
            .waiters
            .lock()
            .expect("waiters lock")
            .acks
            .insert(key, tx);
        self.shared.write(packet)?;
        match rx.recv_timeout(self.timeout) {
            Ok(p) => Ok(p),
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => Err(BrokerError::Timeout(what)),
            Err(_) => Err(BrokerError::Closed),
        }
    }

    /// Publishes; at QoS 1 blocks until the broker's PUBACK.
    pub fn publish(&self, topic: &str, payload: Vec<u8>, qos: QoS) -> Result<(), BrokerError> {
        validate_topic_name(topic)?;
        if payload.len() > MAX_PAYLOAD {
            return Err(BrokerError::PayloadTooLarge(payload.len()));
        }
        match qos {
            QoS::AtMostOnce => self.shared.write(&Packet::Publish(Publish {
                dup: false,
                qos,
                retain: false,
                topic: topic.to_owned(),
                packet_id: None,
                payload,
            })),
            QoS::AtLeastOnce => {
                let pid = self.shared.pid();
                let p = Packet::Publish(Publish {
                    dup: false,
                    qos,
                    retain: false,
                    topic: topic.to_owned(),
                    packet_id: Some(pid),
                    payload,
                });
                self.wait_ack(AckKey::Pub(pid), &p, "PUBACK").map(|_| ())
            }
        }
    }

    pub fn subscribe(&self, filter: &str, qos: QoS) -> Result<QoS, BrokerError> {
        TopicFilter::parse(filter)?;
        let pid = self.shared.pid();
        let p = Packet::Subscribe {
            packet_id: pid,
            filters: vec![(filter.to_owned(), qos as u8)],
        };
        match self.wait_ack(AckKey::Sub(pid), &p, "SUBACK")? {
            Packet::SubAck { codes, .. } => codes
                .first()
                .and_then(|c| QoS::from_u8(*c))
                .ok_or(BrokerError::Refused(codes.first().copied().unwrap_or(0x80))),
            _ => Err(BrokerError::Closed),
        }
    }

    pub fn unsubscribe(&self, filter: &str) -> Result<(), BrokerError> {
        let pid = self.shared.pid();
        let p = Packet::Unsubscribe {
            packet_id: pid,
            filters: vec![filter.to_owned()],
        };
        self.wait_ack(AckKey::Unsub(pid), &p, "UNSUBACK").map(|_| ())
    }

    /// Round trip through the broker core. Every publish written before
    /// this call has been routed when it returns.
    pub fn ping(&self) -> Result<(), BrokerError> {
        let (tx, rx) = bounded(1);
        self.shared
            .waiters
            .lock()
            .expect("waiters lock")
            .pings
            .push_back(tx);
        self.shared.write(&Packet::PingReq)?;
        match rx.recv_timeout(self.timeout) {
            Ok(()) => Ok(()),
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => Err(BrokerError::Timeout("PINGRESP")),
            Err(_) => Err(BrokerError::Closed),
        }
    }

    /// Acknowledges a QoS 1 delivery when `auto_ack` is off.
    pub fn ack(&self, packet_id: u16) -> Result<(), BrokerError> {
        self.shared.write(&Packet::PubAck { packet_id })
    }

    pub fn deliveries(&self) -> &Receiver<Delivery> {
        &self.deliveries
    }

    pub fn is_connected(&self) -> bool {
        !self.shared.closed.load(Ordering::SeqCst)
    }

    pub fn disconnect(mut self) {
        let _ = self.shared.write(&Packet::Disconnect);
        self.close();
    }

    fn close(&mut self) {
        self.shared.closed.store(true, Ordering::SeqCst);
        if let Ok(w) = self.shared.writer.lock() {
            let _ = w.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MqttClient {
    fn drop(&mut self) {
        self.close();
    }
}

fn reader_loop(
    mut reader: BufReader<TcpStream>,
    shared: Arc<Shared>,
    deliveries: Sender<Delivery>,
    auto_ack: bool,
) {
    while let Ok((packet, _)) = read_packet(&mut reader) {
        match packet {
            Packet::Publish(p) => {
                if auto_ack {
                    if let Some(pid) = p.packet_id {
                        let _ = shared.write(&Packet::PubAck { packet_id: pid });
                    }
                }
                let _ = deliveries.send(Delivery {
                    topic: p.topic,
                    payload: p.payload,
                    qos: p.qos,
                    dup: p.dup,
                    packet_id: p.packet_id,
                });
            }
            Packet::PubAck { packet_id } => notify(&shared, AckKey::Pub(packet_id), packet),
            Packet::SubAck { packet_id, .. } => notify(&shared, AckKey::Sub(packet_id), packet),
            Packet::UnsubAck { packet_id } => notify(&shared, AckKey::Unsub(packet_id), packet),
            Packet::PingResp => {
                if let Some(tx) = shared.waiters.lock().expect("waiters lock").pings.pop_front() {
                    let _ = tx.send(());
                }
            }
            _ => break,
        }
    }
    shared.closed.store(true, Ordering::SeqCst);
    let mut w = shared.waiters.lock().expect("waiters lock");
    w.acks.clear();
    w.pings.clear();
}

fn notify(shared: &Shared, key: AckKey, packet: Packet) {
    if let Some(tx) = shared.waiters.lock().expect("waiters lock").acks.remove(&key) {
        let _ = tx.send(packet);
    }
}
