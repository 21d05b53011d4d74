//! Canonical JSON measurement envelope.
//!
//! Keys are always written in this order, with no insignificant whitespace:
//! `node_id, channel, seq, t_acq_us, mode, unit, fs_hz, window_len, payload`.
//! Numbers use the shortest decimal that round-trips; feature maps are
//! written in sorted key order. Decoding is strict: unknown keys are errors.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::{is_valid_token, Unit};

pub type FeatureMap = BTreeMap<String, f64>;

/// The three node processing configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProcessingMode {
    /// Raw samples forwarded, no processing on the node.
    Raw = 1,
    /// Features extracted on the node; only features leave it.
    Features = 2,
    /// Node pre-processes (features + decimated raw), edge post-processes.
    Hybrid = 3,
}

impl ProcessingMode {
    pub const ALL: [ProcessingMode; 3] = [
        ProcessingMode::Raw,
        ProcessingMode::Features,
        ProcessingMode::Hybrid,
    ];

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(ProcessingMode::Raw),
            2 => Some(ProcessingMode::Features),
            3 => Some(ProcessingMode::Hybrid),
            _ => None,
        }
    }
}

impl Serialize for ProcessingMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for ProcessingMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        ProcessingMode::from_u8(v)
            .ok_or_else(|| serde::de::Error::custom(format!("processing mode {v} not in 1..=3")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Raw(Vec<f64>),
    Features(FeatureMap),
    Hybrid { raw: Vec<f64>, features: FeatureMap },
}

impl Payload {
    pub fn mode(&self) -> ProcessingMode {
        match self {
            Payload::Raw(_) => ProcessingMode::Raw,
            Payload::Features(_) => ProcessingMode::Features,
            Payload::Hybrid { .. } => ProcessingMode::Hybrid,
        }
    }

    /// Number of numeric values carried.
    pub fn value_count(&self) -> usize {
        match self {
            Payload::Raw(r) => r.len(),
            Payload::Features(f) => f.len(),
            Payload::Hybrid { raw, features } => raw.len() + features.len(),
        }
    }

    pub fn raw(&self) -> Option<&[f64]> {
        match self {
            Payload::Raw(r) | Payload::Hybrid { raw: r, .. } => Some(r),
            Payload::Features(_) => None,
        }
    }

    pub fn features(&self) -> Option<&FeatureMap> {
        match self {
            Payload::Features(f) | Payload::Hybrid { features: f, .. } => Some(f),
            Payload::Raw(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMessage {
    pub node_id: String,
    pub channel: String,
    /// Per (node, channel) counter, strictly increasing.
    pub seq: u64,
    /// Sync-corrected acquisition time of the first sample, µs since epoch.
    pub t_acq_us: i64,
    pub mode: ProcessingMode,
    pub unit: Unit,
    pub fs_hz: f64,
    /// Number of acquired samples the payload summarizes.
    pub window_len: u32,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnvelopeError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("schema violation at {0}")]
    SchemaViolation(String),
    #[error("invariant violated: {0}")]
    InvariantViolation(&'static str),
}

impl MeasurementMessage {
    /// Checks every envelope invariant, reporting the first failing field.
    pub fn validate(&self) -> Result<(), EnvelopeError> {
        use EnvelopeError::InvariantViolation as V;
        if !is_valid_token(&self.node_id) {
            return Err(V("node_id"));
        }
        if !is_valid_token(&self.channel) {
            return Err(V("channel"));
        }
        if self.t_acq_us <= 0 {
            return Err(V("t_acq_us"));
        }
        if !(self.fs_hz.is_finite() && self.fs_hz > 0.0) {
            return Err(V("fs_hz"));
        }
        if self.payload.mode() != self.mode {
            return Err(V("mode"));
        }
        if self.window_len == 0 {
            return Err(V("window_len"));
        }
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        let features_ok = |f: &FeatureMap| {
            !f.is_empty() && f.iter().all(|(k, v)| !k.is_empty() && v.is_finite())
        };
        match &self.payload {
            Payload::Raw(raw) => {
                if raw.len() != self.window_len as usize {
                    return Err(V("window_len"));
                }
                if !finite(raw) {
                    return Err(V("payload"));
                }
            }
            Payload::Features(f) => {
                if !features_ok(f) {
                    return Err(V("payload"));
                }
            }
            Payload::Hybrid { raw, features } => {
                if raw.is_empty() || self.window_len as usize % raw.len() != 0 {
                    return Err(V("window_len"));
                }
                if !finite(raw) || !features_ok(features) {
                    return Err(V("payload"));
                }
            }
        }
        Ok(())
    }
}

fn push_number(out: &mut String, x: f64) {
    // serde_json formats f64 through ryu: shortest round-trip representation.
    out.push_str(&serde_json::Number::from_f64(x).expect("finite").to_string());
}

fn push_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("string serializes"));
}

fn push_raw(out: &mut String, raw: &[f64]) {
    out.push('[');
    for (i, x) in raw.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_number(out, *x);
    }
    out.push(']');
}

fn push_features(out: &mut String, f: &FeatureMap) {
    out.push('{');
    for (i, (k, v)) in f.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_str(out, k);
        out.push(':');
        push_number(out, *v);
    }
    out.push('}');
}

/// Canonical byte encoding of a valid message.
pub fn encode_message(msg: &MeasurementMessage) -> Result<Vec<u8>, EnvelopeError> {
    msg.validate()?;
    let mut out = String::with_capacity(128 + msg.payload.value_count() * 20);
    out.push_str("{\"node_id\":");
    push_str(&mut out, &msg.node_id);
    out.push_str(",\"channel\":");
    push_str(&mut out, &msg.channel);
    let _ = write!(
        out,
        ",\"seq\":{},\"t_acq_us\":{},\"mode\":{},\"unit\":",
        msg.seq,
        msg.t_acq_us,
        msg.mode.as_u8()
    );
    push_str(&mut out, msg.unit.as_str());
    out.push_str(",\"fs_hz\":");
    push_number(&mut out, msg.fs_hz);
    let _ = write!(out, ",\"window_len\":{},\"payload\":", msg.window_len);
    match &msg.payload {
        Payload::Raw(raw) => {
            out.push_str("{\"raw\":");
            push_raw(&mut out, raw);
            out.push('}');
        }
        Payload::Features(f) => {
            out.push_str("{\"features\":");
            push_features(&mut out, f);
            out.push('}');
        }
        Payload::Hybrid { raw, features } => {
            out.push_str("{\"raw\":");
            push_raw(&mut out, raw);
            out.push_str(",\"features\":");
            push_features(&mut out, features);
            out.push('}');
        }
    }
    out.push('}');
    Ok(out.into_bytes())
}

const FIELDS: [&str; 9] = [
    "node_id",
    "channel",
    "seq",
    "t_acq_us",
    "mode",
    "unit",
    "fs_hz",
    "window_len",
    "payload",
];

fn schema(path: &str) -> EnvelopeError {
    EnvelopeError::SchemaViolation(path.to_owned())
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Value, EnvelopeError> {
    obj.get(key).ok_or_else(|| schema(key))
}

fn string_field(obj: &Map<String, Value>, key: &str) -> Result<String, EnvelopeError> {
    field(obj, key)?
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| schema(key))
}

fn number(v: &Value, path: &str) -> Result<f64, EnvelopeError> {
    v.as_f64().ok_or_else(|| schema(path))
}

fn decode_raw(v: &Value) -> Result<Vec<f64>, EnvelopeError> {
    let arr = v.as_array().ok_or_else(|| schema("payload.raw"))?;
    arr.iter()
        .enumerate()
        .map(|(i, x)| number(x, &format!("payload.raw[{i}]")))
        .collect()
}

fn decode_features(v: &Value) -> Result<FeatureMap, EnvelopeError> {
    let obj = v.as_object().ok_or_else(|| schema("payload.features"))?;
    obj.iter()
        .map(|(k, x)| Ok((k.clone(), number(x, &format!("payload.features.{k}"))?)))
        .collect()
}

fn decode_payload(v: &Value) -> Result<Payload, EnvelopeError> {
    let obj = v.as_object().ok_or_else(|| schema("payload"))?;
    if let Some(k) = obj.keys().find(|k| *k != "raw" && *k != "features") {
        return Err(schema(&format!("payload.{k}")));
    }
    match (obj.get("raw"), obj.get("features")) {
        (Some(r), None) => Ok(Payload::Raw(decode_raw(r)?)),
        (None, Some(f)) => Ok(Payload::Features(decode_features(f)?)),
        (Some(r), Some(f)) => Ok(Payload::Hybrid {
            raw: decode_raw(r)?,
            features: decode_features(f)?,
        }),
        (None, None) => Err(schema("payload")),
    }
}

/// Strict decoder: validates schema, then every envelope invariant.
pub fn decode_message(bytes: &[u8]) -> Result<MeasurementMessage, EnvelopeError> {
    let doc: Value = serde_json::from_slice(bytes)
        .map_err(|e| EnvelopeError::MalformedDocument(e.to_string()))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| EnvelopeError::MalformedDocument("top level is not an object".into()))?;
    if let Some(k) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(schema(k));
    }
    // Required fields are checked in canonical order so the reported path is stable.
    for f in FIELDS {
        field(obj, f)?;
    }
    let node_id = string_field(obj, "node_id")?;
    let channel = string_field(obj, "channel")?;
    let seq = field(obj, "seq")?.as_u64().ok_or_else(|| schema("seq"))?;
    let t_acq_us = field(obj, "t_acq_us")?
        .as_i64()
        .ok_or_else(|| schema("t_acq_us"))?;
    let mode = field(obj, "mode")?
        .as_u64()
        .and_then(|m| u8::try_from(m).ok())
        .and_then(ProcessingMode::from_u8)
        .ok_or_else(|| schema("mode"))?;
    let unit: Unit = string_field(obj, "unit")?
        .parse()
        .map_err(|_| schema("unit"))?;
    let fs_hz = number(field(obj, "fs_hz")?, "fs_hz")?;
    let window_len = field(obj, "window_len")?
        .as_u64()
        .and_then(|w| u32::try_from(w).ok())
        .ok_or_else(|| schema("window_len"))?;
    let payload = decode_payload(field(obj, "payload")?)?;
    let msg = MeasurementMessage {
        node_id,
        channel,
        seq,
        t_acq_us,
        mode,
        unit,
        fs_hz,
        window_len,
        payload,
    };
    msg.validate()?;
    Ok(msg)
}

/// Violation found by [`SeqTracker`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SeqAnomaly {
    /// `seq` did not increase.
    NonMonotonic { node_id: String, channel: String, prev: u64, got: u64 },
    /// One or more sequence numbers were skipped.
    Gap { node_id: String, channel: String, missing: u64 },
}

/// Checks per-(node, channel) sequence monotonicity over a stream.
#[derive(Debug, Default)]
pub struct SeqTracker {
    last: HashMap<(String, String), u64>,
}

impl SeqTracker {
    pub fn observe(&mut self, msg: &MeasurementMessage) -> Option<SeqAnomaly> {
        let key = (msg.node_id.clone(), msg.channel.clone());
        let prev = self.last.insert(key, msg.seq)?;
        if msg.seq <= prev {
            Some(SeqAnomaly::NonMonotonic {
                node_id: msg.node_id.clone(),
                channel: msg.channel.clone(),
                prev,
                got: msg.seq,
            })
        } else if msg.seq > prev + 1 {
            Some(SeqAnomaly::Gap {
                node_id: msg.node_id.clone(),
                channel: msg.channel.clone(),
                missing: msg.seq - prev - 1,
            })
        } else {
            None
        }
    }
}
