use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;
use std::time::Duration;

use dsm_broker::codec::publish_frame_len;
use dsm_broker::sync::SyncMessage;
use dsm_broker::{QoS, SyncRequest};
use dsm_core::clock::Clock;
use dsm_core::dsp::{detect_events, quantize, to_engineering_units, AdcSpec, Calibration, DspError, EventKind, Thresholds};
use dsm_core::{
    encode_message, ChannelDescriptor, EnvelopeError, MeasurementMessage, ProcessingMode, TopicError,
    TopicKind, TopicPath,
};
use serde::{Deserialize, Serialize};

use crate::command::{Ack, Command, Rejected};
use crate::config::mode_supported;
use crate::{
    apply_mode, sync_exchange, ClockModel, ConfigError, EnergyUse, NodeConfig, Sample, SignalSource,
    SourceBatch, SyncError, SyncEstimate, Transport,
};

/// Windows larger than this would not fit the broker payload limit in raw mode.
pub const MAX_WINDOW: u32 = 8192;

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("invalid node configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error("log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub data_messages: u64,
    pub data_values: u64,
    /// MQTT frame bytes of data messages.
    pub data_bytes: u64,
    pub messages_sent: u64,
    pub bytes_sent: u64,
    pub buffered: usize,
    pub dropped_oldest: u64,
    pub events_sent: u64,
    pub acks_sent: u64,
    pub syncs: u64,
    pub sync_failures: u64,
    pub last_sync: Option<(i64, i64)>,
    pub energy: EnergyUse,
}

/// One line of the node's transmit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub node_id: String,
    pub topic: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_acq_us: Option<i64>,
    #[serde(default)]
    pub values: usize,
    pub frame_bytes: usize,
    pub envelope_bytes: usize,
    #[serde(default)]
    pub cpu: f64,
    pub radio: f64,
}

#[derive(Debug, Clone)]
struct Outgoing {
    topic: String,
    payload: Vec<u8>,
    qos: QoS,
    kind: &'static str,
    channel: Option<String>,
    seq: Option<u64>,
    mode: Option<u8>,
    t_acq_us: Option<i64>,
    values: usize,
    cpu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ChannelSettings {
    mode: ProcessingMode,
    window: u32,
    fs_hz: f64,
}

struct ChannelState {
    desc: ChannelDescriptor,
    events: Option<Thresholds>,
    adc: Option<(AdcSpec, Calibration)>,
    native_fs: f64,
    cur: ChannelSettings,
    next: Option<ChannelSettings>,
    /// Samples skipped since the last kept one, for rate reduction.
    phase: usize,
    acc: Vec<f64>,
    first_t: i64,
    seq: u64,
}

impl ChannelState {
    fn stride(&self) -> usize {
        (self.native_fs / self.cur.fs_hz).round() as usize
    }

    fn target(&self) -> ChannelSettings {
        self.next.unwrap_or(self.cur)
    }

    fn condition(&self, v: f64) -> Result<f64, DspError> {
        match &self.adc {
            None => Ok(v),
            Some((adc, cal)) => {
                let code = quantize(&[cal.to_volts(v)], adc);
                Ok(to_engineering_units(&code, adc, cal)?[0])
            }
        }
    }
}

pub struct SensorNode<T: Transport> {
    cfg: NodeConfig,
    transport: T,
    clock: Arc<dyn Clock>,
    clock_model: ClockModel,
    boot_us: i64,
    channels: Vec<ChannelState>,
    buffer: VecDeque<Outgoing>,
    inbox: VecDeque<dsm_broker::Delivery>,
    stats: NodeStats,
    log: Option<Box<dyn Write + Send>>,
    last_sync_true_us: Option<i64>,
    sync_timeout: Duration,
    subscribed: bool,
    cmd_topic: String,
    ack_topic: String,
    sync_topic: String,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl<T: Transport> SensorNode<T> {
    /// `clock` reads gateway time; the node derives its own drifting
    /// clock from it through the configured [`ClockModel`].
    pub fn new(cfg: NodeConfig, transport: T, clock: Arc<dyn Clock>) -> Result<Self, NodeError> {
        cfg.validate()?;
        let node_topic = |k| TopicPath::node(&cfg.site, &cfg.node_id, k).map(|t| t.render());
        let channels = cfg
            .channels
            .iter()
            .map(|c| {
                let d = &c.descriptor;
                let adc = d.adc.zip(d.effective_calibration());
                ChannelState {
                    desc: d.clone(),
                    events: c.events,
                    adc,
                    native_fs: d.fs_hz,
                    cur: ChannelSettings {
                        mode: cfg.initial_mode(d),
                        window: d.window,
                        fs_hz: d.fs_hz,
                    },
                    next: None,
                    phase: 0,
                    acc: Vec::with_capacity(d.window as usize),
                    first_t: 0,
                    seq: 0,
                }
            })
            .collect();
        Ok(SensorNode {
            cmd_topic: node_topic(TopicKind::Cmd)?,
            ack_topic: node_topic(TopicKind::Events)?,
            sync_topic: node_topic(TopicKind::Sync)?,
            clock_model: cfg.clock,
            boot_us: clock.now_us(),
            cfg,
            transport,
            clock,
            channels,
            buffer: VecDeque::new(),
            inbox: VecDeque::new(),
            stats: NodeStats::default(),
            log: None,
            last_sync_true_us: None,
            sync_timeout: Duration::from_secs(2),
            subscribed: false,
        })
    }

    pub fn with_log(mut self, w: Box<dyn Write + Send>) -> Self {
        self.log = Some(w);
        self
    }

    pub fn node_id(&self) -> &str {
        &self.cfg.node_id
    }

    pub fn stats(&self) -> &NodeStats {
        &self.stats
    }

    pub fn clock_model(&self) -> &ClockModel {
        &self.clock_model
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    /// Node clock reading (sync-corrected) at the current gateway time.
    pub fn now_local_us(&self) -> i64 {
        self.clock_model.corrected_us(self.clock.now_us(), self.boot_us)
    }

    /// Current mode of a channel, or `None` if the channel is unknown.
    pub fn channel_mode(&self, channel: &str) -> Option<ProcessingMode> {
        self.channels
            .iter()
            .find(|c| c.desc.channel() == channel)
            .map(|c| c.cur.mode)
    }

    /// Hash of the configuration every channel will run with once
    /// pending changes take effect.
    pub fn config_digest(&self) -> String {
        let mut s = String::new();
        for c in &self.channels {
            let t = c.target();
            s.push_str(&format!("{}:{}:{}:{};", c.desc.channel(), t.mode.as_u8(), t.window, t.fs_hz));
        }
        format!("{:016x}", fnv1a(s.as_bytes()))
    }

    fn ensure_connected(&mut self) -> bool {
        if self.transport.is_connected() {
            return true;
        }
        match self.transport.reconnect() {
            Ok(()) => {
                log::info!("{}: connected", self.cfg.node_id);
                let (cmd, sync) = (self.cmd_topic.clone(), self.sync_topic.clone());
                // Subscriptions persist inside the transport across reconnects.
                if !self.subscribed {
                    self.subscribed = self.transport.subscribe(&cmd, QoS::AtLeastOnce).is_ok()
                        && self.transport.subscribe(&sync, QoS::AtMostOnce).is_ok();
                }
                true
            }
            Err(e) => {
                log::debug!("{}: reconnect failed: {e}", self.cfg.node_id);
                false
            }
        }
    }

    /// Processes one batch of acquired samples: commands first, then a
    /// clock sync if one is due, then the samples.
    pub fn tick(&mut self, batch: &SourceBatch) -> Result<(), NodeError> {
        let connected = self.ensure_connected();
        if connected && self.transport.barrier().is_ok() {
            self.drain_commands()?;
        }
        self.flush_buffer()?;
        if self.sync_due(batch.now_us) && self.transport.is_connected() {
            self.last_sync_true_us = Some(batch.now_us);
            match self.sync() {
                Ok(_) => {}
                Err(e) => {
                    self.stats.sync_failures += 1;
                    log::warn!("{}: clock sync failed: {e}", self.cfg.node_id);
                }
            }
        }
        for (name, samples) in &batch.channels {
            match self.channels.iter().position(|c| c.desc.channel() == name) {
                Some(i) => self.ingest(i, samples)?,
                None => log::debug!("{}: no channel {name}", self.cfg.node_id),
            }
        }
        if self.transport.is_connected() {
            let _ = self.transport.barrier();
        }
        if let Some(w) = self.log.as_mut() {
            w.flush()?;
        }
        Ok(())
    }

    fn sync_due(&self, now_us: i64) -> bool {
        if self.cfg.sync_period_s <= 0.0 {
            return false;
        }
        match self.last_sync_true_us {
            None => true,
            Some(t) => (now_us - t) as f64 >= self.cfg.sync_period_s * 1e6,
        }
    }

    /// Runs one request/response exchange and applies the correction.
    pub fn sync(&mut self) -> Result<SyncEstimate, SyncError> {
        let t1 = self.now_local_us();
        let req = serde_json::to_vec(&SyncRequest { t1 }).expect("serializable");
        let out = Outgoing {
            topic: self.sync_topic.clone(),
            payload: req,
            qos: QoS::AtMostOnce,
            kind: "sync",
            channel: None,
            seq: None,
            mode: None,
            t_acq_us: None,
            values: 0,
            cpu: 0.0,
        };
        if !matches!(self.transmit(&out), Ok(true)) {
            return Err(SyncError::Timeout);
        }
        let deadline = std::time::Instant::now() + self.sync_timeout;
        loop {
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            if left.is_zero() {
                return Err(SyncError::Timeout);
            }
            let Some(d) = self.transport.recv_timeout(left) else {
                if !self.transport.is_connected() {
                    return Err(SyncError::Timeout);
                }
                continue;
            };
            if d.topic == self.sync_topic {
                if let Some(SyncMessage::Response(r)) = SyncMessage::parse(&d.payload) {
                    if r.t1 == t1 {
                        let t4 = self.now_local_us();
                        let est = sync_exchange(r.t1, r.t2, r.t3, t4)?;
                        self.clock_model.apply(est);
                        self.stats.syncs += 1;
                        self.stats.last_sync = Some((est.offset_us, est.delay_us));
                        return Ok(est);
                    }
                }
            } else {
                self.inbox.push_back(d);
            }
        }
    }

    fn drain_commands(&mut self) -> Result<(), NodeError> {
        while let Some(d) = self.inbox.pop_front().or_else(|| self.transport.try_recv()) {
            if d.topic != self.cmd_topic {
                continue;
            }
            let ack = match Command::parse(&d.payload) {
                Ok((req_id, cmd)) => {
                    let name = cmd.name().to_owned();
                    match self.execute(cmd) {
                        Ok(()) => Ack {
                            req_id: Some(req_id),
                            ok: true,
                            reason: None,
                            node_id: self.cfg.node_id.clone(),
                            cmd: Some(name),
                            config_digest: Some(self.config_digest()),
                        },
                        Err(reason) => Ack {
                            req_id: Some(req_id),
                            ok: false,
                            reason: Some(reason),
                            node_id: self.cfg.node_id.clone(),
                            cmd: Some(name),
                            config_digest: None,
                        },
                    }
                }
                Err(Rejected { req_id, cmd, reason }) => Ack {
                    req_id,
                    ok: false,
                    reason: Some(reason),
                    node_id: self.cfg.node_id.clone(),
                    cmd,
                    config_digest: None,
                },
            };
            log::info!("{}: ack {:?} ok={}", self.cfg.node_id, ack.req_id, ack.ok);
            self.stats.acks_sent += 1;
            let out = Outgoing {
                topic: self.ack_topic.clone(),
                payload: serde_json::to_vec(&ack).expect("serializable"),
                qos: QoS::AtLeastOnce,
                kind: "ack",
                channel: None,
                seq: None,
                mode: None,
                t_acq_us: None,
                values: 0,
                cpu: 0.0,
            };
            self.send(out)?;
        }
        Ok(())
    }

    /// Validates a command against every targeted channel and stages the
    /// change; nothing is staged if any channel rejects it.
    fn execute(&mut self, cmd: Command) -> Result<(), String> {
        let target = match &cmd {
            Command::Ping => return Ok(()),
            Command::SetMode { channel, .. }
            | Command::SetWindow { channel, .. }
            | Command::SetRate { channel, .. } => channel.clone(),
        };
        let idx: Vec<usize> = match &target {
            Some(name) => match self.channels.iter().position(|c| c.desc.channel() == name) {
                Some(i) => vec![i],
                None => return Err(format!("unknown channel {name}")),
            },
            None => (0..self.channels.len()).collect(),
        };
        let factor = self.cfg.decimation_factor;
        let mut staged = Vec::new();
        for i in idx {
            let c = &self.channels[i];
            let mut s = c.target();
            match &cmd {
                Command::SetMode { mode, channel } => {
                    let m = ProcessingMode::from_u8(*mode).ok_or(format!("mode {mode} not in 1..=3"))?;
                    // A node-wide mode change leaves single-sample channels raw.
                    if channel.is_none() && s.window < 2 {
                        continue;
                    }
                    s.mode = m;
                }
                Command::SetWindow { window, .. } => {
                    if *window == 0 || *window > MAX_WINDOW {
                        return Err(format!("window must be in 1..={MAX_WINDOW}"));
                    }
                    s.window = *window;
                }
                Command::SetRate { fs_hz, .. } => {
                    let ratio = c.native_fs / fs_hz;
                    if !(fs_hz.is_finite() && *fs_hz > 0.0)
                        || ratio < 1.0 - 1e-9
                        || (ratio - ratio.round()).abs() > 1e-9
                    {
                        return Err(format!(
                            "rate {fs_hz} Hz is not an integer divisor of {} Hz",
                            c.native_fs
                        ));
                    }
                    s.fs_hz = c.native_fs / ratio.round();
                }
                Command::Ping => unreachable!(),
            }
            mode_supported(s.mode, s.window, factor)
                .map_err(|e| format!("{}: {e}", c.desc.channel()))?;
            let period = s.window as f64 / s.fs_hz * 1e6;
            if (period - period.round()).abs() > 1e-6 {
                return Err(format!(
                    "{}: window {} at {} Hz is not a whole number of microseconds",
                    c.desc.channel(),
                    s.window,
                    s.fs_hz
                ));
            }
            staged.push((i, s));
        }
        for (i, s) in staged {
            let c = &mut self.channels[i];
            c.next = (s != c.cur).then_some(s);
        }
        Ok(())
    }

    fn ingest(&mut self, i: usize, samples: &[Sample]) -> Result<(), NodeError> {
        for s in samples {
            let c = &mut self.channels[i];
            if c.acc.is_empty() {
                if let Some(n) = c.next.take() {
                    if n.fs_hz != c.cur.fs_hz {
                        c.phase = 0;
                    }
                    c.cur = n;
                    log::info!(
                        "{}/{}: now mode {} window {} at {} Hz",
                        self.cfg.node_id,
                        c.desc.channel(),
                        n.mode.as_u8(),
                        n.window,
                        n.fs_hz
                    );
                }
            }
            let keep = c.phase % c.stride() == 0;
            c.phase += 1;
            if !keep {
                continue;
            }
            if c.acc.is_empty() {
                c.first_t = s.t_us;
            }
            let v = c.condition(s.value)?;
            c.acc.push(v);
            if c.acc.len() == c.cur.window as usize {
                self.close_window(i)?;
            }
        }
        Ok(())
    }

    fn close_window(&mut self, i: usize) -> Result<(), NodeError> {
        let node_id = self.cfg.node_id.clone();
        let factor = self.cfg.decimation_factor as usize;
        let period = 1e6 / self.channels[i].cur.fs_hz;
        let c = &mut self.channels[i];
        let window = std::mem::take(&mut c.acc);
        let set = c.cur;
        let t_acq = self.clock_model.corrected_us(c.first_t, self.boot_us);
        let p = apply_mode(&window, set.mode, factor, set.fs_hz)?;
        let cpu = self.cfg.energy.cpu_cost(window.len(), p.feature_work);
        self.stats.energy.cpu += cpu;
        let msg = MeasurementMessage {
            node_id: node_id.clone(),
            channel: c.desc.channel().to_owned(),
            seq: c.seq,
            t_acq_us: t_acq,
            mode: set.mode,
            unit: c.desc.quantity.unit(),
            fs_hz: set.fs_hz,
            window_len: set.window,
            payload: p.payload,
        };
        c.seq += 1;
        c.acc = Vec::with_capacity(set.window as usize);
        let kind = if set.mode == ProcessingMode::Raw {
            TopicKind::Raw
        } else {
            TopicKind::Features
        };
        let topic = c.desc.topic.with_kind(kind, c.desc.channel())?.render();
        let mut events = Vec::new();
        if let Some(th) = c.events {
            for e in detect_events(&window, th)? {
                events.push(serde_json::json!({
                    "node_id": node_id,
                    "channel": c.desc.channel(),
                    "t_us": t_acq + (e.index as f64 * period).round() as i64,
                    "kind": match e.kind { EventKind::Rising => "rising", EventKind::Falling => "falling" },
                    "value": window[e.index],
                }));
            }
        }
        let events_topic = c.desc.topic.with_kind(TopicKind::Events, c.desc.channel())?.render();
        let out = Outgoing {
            topic,
            payload: encode_message(&msg)?,
            qos: if set.mode == ProcessingMode::Raw {
                QoS::AtMostOnce
            } else {
                QoS::AtLeastOnce
            },
            kind: "data",
            channel: Some(msg.channel.clone()),
            seq: Some(msg.seq),
            mode: Some(set.mode.as_u8()),
            t_acq_us: Some(t_acq),
            values: msg.payload.value_count(),
            cpu,
        };
        self.send(out)?;
        for e in events {
            self.stats.events_sent += 1;
            self.send(Outgoing {
                topic: events_topic.clone(),
                payload: serde_json::to_vec(&e).expect("serializable"),
                qos: QoS::AtLeastOnce,
                kind: "event",
                channel: Some(msg.channel.clone()),
                seq: None,
                mode: None,
                t_acq_us: None,
                values: 0,
                cpu: 0.0,
            })?;
        }
        Ok(())
    }

    /// Publishes now if possible, otherwise queues behind older messages.
    fn send(&mut self, out: Outgoing) -> Result<(), NodeError> {
        self.flush_buffer()?;
        if self.buffer.is_empty() && self.transport.is_connected() && self.transmit(&out)? {
            return Ok(());
        }
        self.buffer.push_back(out);
        if self.buffer.len() > self.cfg.buffer_capacity {
            self.buffer.pop_front();
            self.stats.dropped_oldest += 1;
        }
        self.stats.buffered = self.buffer.len();
        Ok(())
    }

    fn flush_buffer(&mut self) -> Result<(), NodeError> {
        if self.buffer.is_empty() || !self.ensure_connected() {
            return Ok(());
        }
        while let Some(front) = self.buffer.front() {
            let front = front.clone();
            if !self.transmit(&front)? {
                break;
            }
            self.buffer.pop_front();
        }
        self.stats.buffered = self.buffer.len();
        Ok(())
    }

    /// `Ok(false)` when the transport refused the message.
    fn transmit(&mut self, out: &Outgoing) -> Result<bool, NodeError> {
        if let Err(e) = self.transport.publish(&out.topic, &out.payload, out.qos) {
            log::debug!("{}: publish failed: {e}", self.cfg.node_id);
            return Ok(false);
        }
        let frame = publish_frame_len(&out.topic, out.payload.len(), out.qos);
        let radio = self.cfg.energy.radio_cost(frame);
        self.stats.energy.radio += radio;
        self.stats.messages_sent += 1;
        self.stats.bytes_sent += frame as u64;
        if out.kind == "data" {
            self.stats.data_messages += 1;
            self.stats.data_values += out.values as u64;
            self.stats.data_bytes += frame as u64;
        }
        if let Some(w) = self.log.as_mut() {
            let row = LogRow {
                node_id: self.cfg.node_id.clone(),
                topic: out.topic.clone(),
                kind: out.kind.to_owned(),
                channel: out.channel.clone(),
                seq: out.seq,
                mode: out.mode,
                t_acq_us: out.t_acq_us,
                values: out.values,
                frame_bytes: frame,
                envelope_bytes: out.payload.len(),
                cpu: out.cpu,
                radio,
            };
            serde_json::to_writer(&mut *w, &row).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(true)
    }
}

/// Feeds every batch from `source` to `node` until the source runs dry.
pub fn run_acquisition_loop<T: Transport>(
    node: &mut SensorNode<T>,
    source: &mut dyn SignalSource,
) -> Result<NodeStats, NodeError> {
    while let Some(batch) = source.next_batch() {
        node.tick(&batch)?;
    }
    Ok(node.stats().clone())
}
