//! Tolerance join of several feature streams.
//!
//! Primary inputs are aligned record for record: the earliest pending head
//! `e` merges with one head from every other primary input when all heads lie
//! in `[e.t, e.t + tol]`; otherwise `e` is dropped. As-of inputs are slow
//! context streams: each merge takes their latest record with
//! `t <= t_merged + tol`.

use std::collections::VecDeque;

use serde::Deserialize;
use serde_json::Value;

use crate::record::{RecordType, WireRecord};
use crate::registry::{parse_params, BuildContext, OutType, PortSpec, StageFactory};
use crate::stage::{Outbox, Stage};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinParams {
    pub inputs: Vec<String>,
    #[serde(default)]
    pub asof: Vec<String>,
    pub tolerance_us: i64,
    #[serde(default = "default_channel")]
    pub channel: String,
}

fn default_channel() -> String {
    "joined".into()
}

impl JoinParams {
    fn check(params: &Value) -> Result<JoinParams, String> {
        let p: JoinParams = parse_params(params)?;
        if p.tolerance_us <= 0 {
            return Err("tolerance_us must be positive".into());
        }
        if p.inputs.is_empty() || p.inputs.len() + p.asof.len() < 2 {
            return Err("join needs at least one primary input and two inputs in total".into());
        }
        let mut names: Vec<&String> = p.inputs.iter().chain(&p.asof).collect();
        names.sort();
        names.dedup();
        if names.len() != p.inputs.len() + p.asof.len() {
            return Err("input names must be unique".into());
        }
        if !dsm_core::is_valid_token(&p.channel) {
            return Err(format!("bad channel {:?}", p.channel));
        }
        Ok(p)
    }
}

pub struct JoinFactory;

impl StageFactory for JoinFactory {
    fn kind(&self) -> &'static str {
        "join"
    }

    fn ports(&self, params: &Value) -> Result<PortSpec, String> {
        let p = JoinParams::check(params)?;
        Ok(PortSpec {
            inputs: p
                .inputs
                .iter()
                .chain(&p.asof)
                .map(|n| (n.clone(), RecordType::Features))
                .collect(),
            outputs: vec![("out".into(), OutType::Fixed(RecordType::Features))],
        })
    }

    fn build(&self, _id: &str, params: &Value, _ctx: &BuildContext) -> Result<Box<dyn Stage>, String> {
        let p = JoinParams::check(params)?;
        Ok(Box::new(JoinStage(JoinCore::new(p.inputs.len(), p.asof.len(), p.tolerance_us, &p.channel))))
    }
}

struct AsofEntry {
    rec: WireRecord,
    used: bool,
}

/// The join state machine, independent of threads and queues.
pub struct JoinCore {
    tol: i64,
    channel: String,
    primary: Vec<VecDeque<WireRecord>>,
    primary_closed: Vec<bool>,
    asof: Vec<VecDeque<AsofEntry>>,
    asof_closed: Vec<bool>,
    watermark: i64,
}

impl JoinCore {
    pub fn new(n_primary: usize, n_asof: usize, tolerance_us: i64, channel: &str) -> Self {
        JoinCore {
            tol: tolerance_us,
            channel: channel.to_owned(),
            primary: (0..n_primary).map(|_| VecDeque::new()).collect(),
            primary_closed: vec![false; n_primary],
            asof: (0..n_asof).map(|_| VecDeque::new()).collect(),
            asof_closed: vec![false; n_asof],
            watermark: i64::MIN,
        }
    }

    /// Port numbering: primaries first, then as-of inputs.
    pub fn push(&mut self, port: usize, rec: WireRecord, out: &mut Outbox) {
        let p = self.primary.len();
        if port < p {
            self.primary[port].push_back(rec);
        } else {
            self.asof[port - p].push_back(AsofEntry { rec, used: false });
        }
        self.step(out);
    }

    pub fn close(&mut self, port: usize, out: &mut Outbox) {
        let p = self.primary.len();
        if port < p {
            self.primary_closed[port] = true;
        } else {
            self.asof_closed[port - p] = true;
        }
        self.step(out);
    }

    pub fn advance(&mut self, w: i64, out: &mut Outbox) {
        self.watermark = self.watermark.max(w);
        self.step(out);
    }

    /// Flushes everything: closes all inputs and drops unused context.
    pub fn finish(&mut self, out: &mut Outbox) {
        self.primary_closed.iter_mut().for_each(|c| *c = true);
        self.asof_closed.iter_mut().for_each(|c| *c = true);
        self.step(out);
        for q in &mut self.asof {
            for e in q.drain(..) {
                if !e.used {
                    out.drop_weight(e.rec.weight);
                }
            }
        }
    }

    fn earliest(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, q) in self.primary.iter().enumerate() {
            if let Some(h) = q.front() {
                if best.is_none_or(|b| h.t_us < self.primary[b].front().expect("nonempty").t_us) {
                    best = Some(i);
                }
            }
        }
        best
    }

    fn asof_ready(&self, tm: i64) -> bool {
        let limit = tm.saturating_add(self.tol);
        self.asof.iter().zip(&self.asof_closed).all(|(q, &closed)| {
            closed || self.watermark >= limit || q.back().is_some_and(|e| e.rec.t_us > limit)
        })
    }

    fn step(&mut self, out: &mut Outbox) {
        while let Some(e) = self.earliest() {
            let et = self.primary[e].front().expect("nonempty").t_us;
            let waiting = self
                .primary
                .iter()
                .zip(&self.primary_closed)
                .any(|(q, &closed)| q.is_empty() && !closed);
            if waiting {
                // A silent input cannot produce a partner for `e` any more.
                if self.watermark > et.saturating_add(2 * self.tol) {
                    let r = self.primary[e].pop_front().expect("nonempty");
                    out.drop_weight(r.weight);
                    continue;
                }
                return;
            }
            let hi = et.saturating_add(self.tol);
            let all_in = self
                .primary
                .iter()
                .all(|q| q.front().is_some_and(|h| h.t_us <= hi));
            if !all_in {
                let r = self.primary[e].pop_front().expect("nonempty");
                out.drop_weight(r.weight);
                continue;
            }
            let sum: i128 = self.primary.iter().map(|q| q.front().expect("nonempty").t_us as i128).sum();
            let tm = (sum as f64 / self.primary.len() as f64).round() as i64;
            if !self.asof_ready(tm) {
                return;
            }
            let members: Vec<WireRecord> = self
                .primary
                .iter_mut()
                .map(|q| q.pop_front().expect("nonempty"))
                .collect();
            let merged = self.merge(tm, et, members, out);
            out.emit(0, merged);
        }
    }

    fn merge(&mut self, tm: i64, et: i64, members: Vec<WireRecord>, out: &mut Outbox) -> WireRecord {
        let mut m = WireRecord::new(tm, "gateway", &self.channel);
        for r in &members {
            m.weight += r.weight;
            add_prefixed(&mut m, r);
        }
        let limit = tm.saturating_add(self.tol);
        for q in &mut self.asof {
            if let Some(e) = q.iter_mut().rev().find(|e| e.rec.t_us <= limit) {
                if !e.used {
                    e.used = true;
                    m.weight += e.rec.weight;
                }
                add_prefixed(&mut m, &e.rec);
            }
            // Entries older than the latest one at or before `et + tol` can
            // never be picked again: later merges look at least that far.
            let floor = et.saturating_add(self.tol);
            while q.len() >= 2 && q[1].rec.t_us <= floor {
                let old = q.pop_front().expect("len >= 2");
                if !old.used {
                    out.drop_weight(old.rec.weight);
                }
            }
        }
        m
    }
}

fn add_prefixed(m: &mut WireRecord, r: &WireRecord) {
    for (k, v) in &r.values {
        m.values.insert(format!("{}.{k}", r.source.channel), *v);
    }
}

struct JoinStage(JoinCore);

impl Stage for JoinStage {
    fn on_record(&mut self, port: usize, rec: WireRecord, out: &mut Outbox) {
        self.0.push(port, rec, out);
    }

    fn on_watermark(&mut self, w: i64, out: &mut Outbox) {
        self.0.advance(w, out);
    }

    fn on_input_closed(&mut self, port: usize, out: &mut Outbox) {
        self.0.close(port, out);
    }

    fn finish(&mut self, out: &mut Outbox) {
        self.0.finish(out);
    }
}
