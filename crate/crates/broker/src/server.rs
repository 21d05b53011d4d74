//! TCP front end: one reader and one writer thread per connection, both
//! talking to the routing core through ordered channels.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{bounded, unbounded, Receiver};

use crate::broker::{Broker, ConnId, CoreMsg, Outbound, Sink};
use crate::codec::{read_packet, CodecError, Packet, MAX_PAYLOAD};
use crate::filter::validate_topic_name;
use crate::metrics::{add, inc, Metrics};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

pub struct TcpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl TcpServer {
    pub fn bind(broker: &Broker, addr: impl ToSocketAddrs) -> io::Result<TcpServer> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let broker = broker.clone();
        let accept = thread::Builder::new()
            .name("broker-accept".into())
            .spawn(move || {
                for stream in listener.incoming() {
                    if stop2.load(Ordering::SeqCst) {
                        break;
                    }
                    match stream {
                        Ok(s) => {
                            let b = broker.clone();
                            let _ = thread::Builder::new()
                                .name("broker-conn".into())
                                .spawn(move || serve_connection(b, s));
                        }
                        Err(e) => log::warn!("accept failed: {e}"),
                    }
                }
            })?;
        Ok(TcpServer {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting new connections. Existing sessions are closed by
    /// [`Broker::shutdown`].
    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn writer_loop(stream: TcpStream, rx: Receiver<Outbound>, metrics: Arc<Metrics>) {
    let mut w = BufWriter::new(stream.try_clone().expect("clone socket"));
    let finish = |done: Option<crossbeam_channel::Sender<()>>| {
        let _ = stream.shutdown(Shutdown::Both);
        if let Some(d) = done {
            let _ = d.send(());
        }
    };
    loop {
        let msg = match rx.recv() {
            Ok(m) => m,
            Err(_) => return finish(None),
        };
        match msg {
            Outbound::Packet(p) => {
                let bytes = p.encode();
                if w.write_all(&bytes).is_err() {
                    return finish(None);
                }
                add(&metrics.bytes_out, bytes.len());
                // Coalesce whatever is already queued before flushing.
                if rx.is_empty() && w.flush().is_err() {
                    return finish(None);
                }
            }
            Outbound::Close(done) => {
                let _ = w.flush();
                return finish(done);
            }
        }
    }
}

fn serve_connection(broker: Broker, stream: TcpStream) {
    let metrics = broker.metrics().clone();
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(CONNECT_TIMEOUT));
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::new(read_half);
    let connect = match read_packet(&mut reader) {
        Ok((Packet::Connect(c), n)) => {
            add(&metrics.bytes_in, n);
            c
        }
        Ok(_) | Err(_) => {
            inc(&metrics.protocol_errors);
            let _ = stream.shutdown(Shutdown::Both);
            return;
        }
    };
    let conn = broker.next_conn_id();
    let (out_tx, out_rx) = unbounded();
    let writer = {
        let s = stream.try_clone().expect("clone socket");
        let m = metrics.clone();
        thread::Builder::new()
            .name("broker-writer".into())
            .spawn(move || writer_loop(s, out_rx, m))
            .expect("spawn writer")
    };
    let (rtx, rrx) = bounded(1);
    let accepted = broker
        .send(CoreMsg::Connect {
            conn,
            client_id: connect.client_id,
            clean_session: connect.clean_session,
            sink: Sink::Tcp(out_tx.clone()),
            reply: rtx,
        })
        .is_ok()
        && matches!(rrx.recv(), Ok(Ok(_)));
    if accepted {
        let timeout = (connect.keep_alive > 0)
            .then(|| Duration::from_millis(connect.keep_alive as u64 * 1500));
        let _ = stream.set_read_timeout(timeout);
        read_loop(&broker, conn, &mut reader, &metrics);
        let _ = broker.send(CoreMsg::Disconnect { conn });
    }
    let _ = out_tx.send(Outbound::Close(None));
    drop(out_tx);
    let _ = writer.join();
}

fn read_loop(broker: &Broker, conn: ConnId, reader: &mut impl io::Read, metrics: &Metrics) {
    loop {
        let (packet, n) = match read_packet(reader) {
            Ok(p) => p,
            Err(CodecError::Io(_)) => return,
            Err(e) => {
                log::debug!("connection {conn}: {e}");
                inc(&metrics.protocol_errors);
                return;
            }
        };
        add(&metrics.bytes_in, n);
        let msg = match packet {
            Packet::Publish(p) => {
                if validate_topic_name(&p.topic).is_err() || p.payload.len() > MAX_PAYLOAD {
                    inc(&metrics.protocol_errors);
                    return;
                }
                CoreMsg::Publish {
                    conn,
                    publish: p,
                    reply: None,
                }
            }
            Packet::PubAck { packet_id } => CoreMsg::PubAck { conn, packet_id },
            Packet::Subscribe { packet_id, filters } => CoreMsg::Subscribe {
                conn,
                packet_id,
                filters,
                reply: None,
            },
            Packet::Unsubscribe { packet_id, filters } => CoreMsg::Unsubscribe {
                conn,
                packet_id,
                filters,
                reply: None,
            },
            Packet::PingReq => CoreMsg::Ping { conn, reply: None },
            Packet::Disconnect => return,
            _ => {
                inc(&metrics.protocol_errors);
                return;
            }
        };
        if broker.send(msg).is_err() {
            return;
        }
    }
}
