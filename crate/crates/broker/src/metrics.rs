//! Broker counters and their Prometheus text rendering.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Default)]
pub struct Metrics {
    pub connections_open: AtomicU64,
    pub connections_total: AtomicU64,
    pub publishes_received: AtomicU64,
    pub messages_routed: AtomicU64,
    pub bytes_in: AtomicU64,
    pub bytes_out: AtomicU64,
    pub redeliveries: AtomicU64,
    pub evictions: AtomicU64,
    pub protocol_errors: AtomicU64,
    pub sync_requests: AtomicU64,
    pub sync_malformed: AtomicU64,
}

pub(crate) fn inc(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

pub(crate) fn add(c: &AtomicU64, n: usize) {
    c.fetch_add(n as u64, Ordering::Relaxed);
}

impl Metrics {
    pub fn get(c: &AtomicU64) -> u64 {
        c.load(Ordering::Relaxed)
    }

    pub fn render_prometheus(&self) -> String {
        let rows: [(&str, &str, &str, &AtomicU64); 11] = [
            ("dsm_broker_connections", "gauge", "Open client connections", &self.connections_open),
            ("dsm_broker_connections_total", "counter", "Accepted client sessions", &self.connections_total),
            ("dsm_broker_publishes_received_total", "counter", "PUBLISH packets received", &self.publishes_received),
            ("dsm_broker_messages_routed_total", "counter", "Deliveries to subscribers", &self.messages_routed),
            ("dsm_broker_bytes_in_total", "counter", "Bytes read from clients", &self.bytes_in),
            ("dsm_broker_bytes_out_total", "counter", "Bytes written to clients", &self.bytes_out),
            ("dsm_broker_redeliveries_total", "counter", "QoS 1 redeliveries", &self.redeliveries),
            ("dsm_broker_evictions_total", "counter", "Sessions evicted", &self.evictions),
            ("dsm_broker_protocol_errors_total", "counter", "Connections closed on protocol errors", &self.protocol_errors),
            ("dsm_broker_sync_requests_total", "counter", "Clock sync requests answered", &self.sync_requests),
            ("dsm_broker_sync_malformed_total", "counter", "Malformed clock sync requests", &self.sync_malformed),
        ];
        let mut out = String::new();
        for (name, kind, help, c) in rows {
            let _ = writeln!(out, "# HELP {name} {help}");
            let _ = writeln!(out, "# TYPE {name} {kind}");
            let _ = writeln!(out, "{name} {}", Self::get(c));
        }
        out
    }
}
