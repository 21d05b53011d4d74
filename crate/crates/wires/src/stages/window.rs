use std::collections::{BTreeMap, VecDeque};

use serde::Deserialize;
use serde_json::Value;

use crate::record::{RecordType, Source, WireRecord, WINDOW_LEN};
use crate::registry::{parse_params, BuildContext, OutType, PortSpec, StageFactory};
use crate::stage::{Outbox, Stage};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    size: usize,
    #[serde(default)]
    hop: Option<usize>,
}

impl Params {
    fn check(params: &Value) -> Result<(usize, usize), String> {
        let p: Params = parse_params(params)?;
        let hop = p.hop.unwrap_or(p.size);
        if p.size < 2 {
            return Err("size must be at least 2".into());
        }
        if hop == 0 || hop > p.size {
            return Err(format!("hop must lie in 1..={}", p.size));
        }
        Ok((p.size, hop))
    }
}

pub struct WindowFactory;

impl StageFactory for WindowFactory {
    fn kind(&self) -> &'static str {
        "window"
    }

    fn ports(&self, params: &Value) -> Result<PortSpec, String> {
        Params::check(params)?;
        Ok(PortSpec {
            inputs: vec![("in".into(), RecordType::Measurement)],
            outputs: vec![("out".into(), OutType::Fixed(RecordType::Measurement))],
        })
    }

    fn build(&self, _id: &str, params: &Value, _ctx: &BuildContext) -> Result<Box<dyn Stage>, String> {
        let (size, hop) = Params::check(params)?;
        Ok(Box::new(Window {
            size,
            hop,
            streams: BTreeMap::new(),
        }))
    }
}

#[derive(Default)]
struct Stream {
    samples: VecDeque<f64>,
    /// Timestamp of `samples[0]`.
    t0: f64,
    period_us: f64,
    tags: BTreeMap<String, String>,
    /// Input weight not yet carried by an output window.
    pending: u64,
}

/// Re-windows sample streams per source with a sliding `size`/`hop` window.
/// Records without samples pass through.
struct Window {
    size: usize,
    hop: usize,
    streams: BTreeMap<Source, Stream>,
}

impl Stage for Window {
    fn on_record(&mut self, _port: usize, rec: WireRecord, out: &mut Outbox) {
        let Some(fs) = rec.fs_hz().filter(|f| *f > 0.0) else {
            out.emit(0, rec);
            return;
        };
        if rec.samples.is_empty() {
            out.emit(0, rec);
            return;
        }
        let s = self.streams.entry(rec.source.clone()).or_default();
        s.period_us = 1e6 / fs;
        if s.samples.is_empty() {
            s.t0 = rec.t_us as f64;
        }
        s.tags = rec.tags;
        s.pending += rec.weight;
        s.samples.extend(rec.samples);
        while s.samples.len() >= self.size {
            let mut w = WireRecord::new(s.t0.round() as i64, &rec.source.node_id, &rec.source.channel);
            w.samples = s.samples.iter().take(self.size).copied().collect();
            w.values.insert(WINDOW_LEN.into(), self.size as f64);
            w.tags = s.tags.clone();
            w.weight = std::mem::take(&mut s.pending);
            out.emit(0, w);
            s.samples.drain(..self.hop);
            s.t0 += self.hop as f64 * s.period_us;
        }
    }

    fn finish(&mut self, out: &mut Outbox) {
        // Samples that never filled a window.
        for s in self.streams.values_mut() {
            out.drop_weight(std::mem::take(&mut s.pending));
        }
    }
}
