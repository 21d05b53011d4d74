use std::path::PathBuf;

use dsm_broker::Delivery;

use crate::record::WireRecord;

/// Collects what a stage produces while handling one input.
#[derive(Debug, Default)]
pub struct Outbox {
    pub(crate) records: Vec<(usize, WireRecord)>,
    pub(crate) dropped: u64,
    pub(crate) dead_lettered: u64,
}

impl Outbox {
    /// Queues `rec` on output port `port` (index into the stage's output list).
    pub fn emit(&mut self, port: usize, rec: WireRecord) {
        self.records.push((port, rec));
    }

    /// Accounts for input weight that will never reach an output.
    pub fn drop_weight(&mut self, w: u64) {
        self.dropped += w;
    }

    pub fn dead_letter(&mut self, w: u64) {
        self.dead_lettered += w;
    }

    pub fn records(&self) -> &[(usize, WireRecord)] {
        &self.records
    }

    pub fn take_records(&mut self) -> Vec<(usize, WireRecord)> {
        std::mem::take(&mut self.records)
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn dead_lettered(&self) -> u64 {
        self.dead_lettered
    }
}

/// Out-of-band requests addressed to a single stage.
#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    ReloadModel(PathBuf),
    ActiveModel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlReply {
    /// Version string of the model now in use.
    Model(String),
    Error(String),
    Unsupported,
}

/// A sequential worker. Every call runs on the stage's own thread.
pub trait Stage: Send {
    fn on_record(&mut self, port: usize, rec: WireRecord, out: &mut Outbox);

    /// Broker deliveries; only subscriber stages receive them.
    fn on_delivery(&mut self, _d: Delivery, _out: &mut Outbox) {}

    /// Event time up to which every input has been delivered.
    fn on_watermark(&mut self, _w: i64, _out: &mut Outbox) {}

    /// All edges into `port` have closed.
    fn on_input_closed(&mut self, _port: usize, _out: &mut Outbox) {}

    /// All inputs have closed; flush anything still held.
    fn finish(&mut self, _out: &mut Outbox) {}

    fn control(&mut self, _c: &Control) -> ControlReply {
        ControlReply::Unsupported
    }

    /// Broker filter this stage consumes, if it is a source.
    fn subscription(&self) -> Option<String> {
        None
    }

    /// Runtime facts worth exposing, such as a bound address.
    fn describe(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}
