use std::collections::BTreeMap;

use dsm_core::{MeasurementMessage, Payload};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Source {
    pub node_id: String,
    pub channel: String,
}

/// The unit flowing between stages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WireRecord {
    pub t_us: i64,
    pub source: Source,
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
    /// Raw samples, present only on records that came from raw or hybrid payloads.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<f64>,
    /// Number of consumed input records this record accounts for.
    #[serde(skip)]
    pub weight: u64,
}

/// Value key carried by sample records so they are never empty.
pub const WINDOW_LEN: &str = "window_len";

impl WireRecord {
    pub fn new(t_us: i64, node_id: &str, channel: &str) -> Self {
        WireRecord {
            t_us,
            source: Source {
                node_id: node_id.to_owned(),
                channel: channel.to_owned(),
            },
            values: BTreeMap::new(),
            tags: BTreeMap::new(),
            samples: Vec::new(),
            weight: 0,
        }
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        if self.t_us <= 0 {
            return Err("t_us must be positive");
        }
        if self.values.is_empty() {
            return Err("values must not be empty");
        }
        Ok(())
    }

    pub fn fs_hz(&self) -> Option<f64> {
        self.tags.get("fs_hz")?.parse().ok()
    }

    /// Whether the record already carries features (anything beyond the window length).
    pub fn has_features(&self) -> bool {
        self.values.keys().any(|k| k != WINDOW_LEN)
    }

    /// Converts a decoded measurement into a record of weight one.
    pub fn from_message(m: &MeasurementMessage) -> Self {
        let mut r = WireRecord::new(m.t_acq_us, &m.node_id, &m.channel);
        r.weight = 1;
        r.tags.insert("mode".into(), m.mode.as_u8().to_string());
        r.tags.insert("seq".into(), m.seq.to_string());
        r.tags.insert("unit".into(), m.unit.as_str().into());
        let fs = match &m.payload {
            // Hybrid samples are decimated: their rate follows from the ratio.
            Payload::Hybrid { raw, .. } => m.fs_hz * raw.len() as f64 / m.window_len as f64,
            _ => m.fs_hz,
        };
        r.tags.insert("fs_hz".into(), fs.to_string());
        if let Some(f) = m.payload.features() {
            r.values.extend(f.iter().map(|(k, v)| (k.clone(), *v)));
        }
        if let Some(raw) = m.payload.raw() {
            r.samples = raw.to_vec();
        }
        r.values.insert(WINDOW_LEN.into(), m.window_len as f64);
        r
    }
}

/// Static record types used to check that edges connect compatible ports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordType {
    /// Decoded measurements: samples and/or node features.
    Measurement,
    /// Named numeric features.
    Features,
    /// Features plus a risk score.
    Scored,
    Any,
}

impl RecordType {
    /// Can a record of type `self` flow into a port that accepts `input`?
    pub fn flows_into(self, input: RecordType) -> bool {
        match (self, input) {
            (_, RecordType::Any) => true,
            (RecordType::Scored, RecordType::Features) => true,
            (a, b) => a == b,
        }
    }
}
