//! Where samples come from: a live feed (the plant simulator) or a
//! recorded session replayed from NDJSON.

use std::io::BufRead;

use crossbeam_channel::Receiver;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Gateway (true) time of acquisition.
    pub t_us: i64,
    pub value: f64,
}

/// Samples acquired up to `now_us`, grouped by channel name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SourceBatch {
    pub now_us: i64,
    pub channels: Vec<(String, Vec<Sample>)>,
}

pub trait SignalSource {
    /// `None` once the source is exhausted.
    fn next_batch(&mut self) -> Option<SourceBatch>;
}

pub struct FeedSource {
    rx: Receiver<SourceBatch>,
}

impl FeedSource {
    pub fn new(rx: Receiver<SourceBatch>) -> Self {
        FeedSource { rx }
    }
}

impl SignalSource for FeedSource {
    fn next_batch(&mut self) -> Option<SourceBatch> {
        self.rx.recv().ok()
    }
}

#[derive(Deserialize)]
struct WindowRow {
    kind: String,
    #[serde(default)]
    t_us: i64,
    #[serde(default)]
    node_id: String,
    #[serde(default)]
    channel: String,
    #[serde(default)]
    fs_hz: f64,
    #[serde(default)]
    samples: Vec<f64>,
}

/// Replays the `window` rows of a recorded session that belong to one node.
/// Each row becomes one batch.
pub struct ReplaySource {
    rows: std::vec::IntoIter<SourceBatch>,
}

impl ReplaySource {
    pub fn from_reader(r: impl BufRead, node_id: &str) -> std::io::Result<Self> {
        let mut out = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: WindowRow = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
            })?;
            if row.kind != "window" || row.node_id != node_id {
                continue;
            }
            if !(row.fs_hz > 0.0) {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("line {}: fs_hz must be positive", i + 1),
                ));
            }
            let period = 1e6 / row.fs_hz;
            let samples: Vec<Sample> = row
                .samples
                .iter()
                .enumerate()
                .map(|(k, &value)| Sample {
                    t_us: row.t_us + (k as f64 * period).round() as i64,
                    value,
                })
                .collect();
            out.push(SourceBatch {
                now_us: row.t_us + (row.samples.len() as f64 * period).round() as i64,
                channels: vec![(row.channel, samples)],
            });
        }
        Ok(ReplaySource {
            rows: out.into_iter(),
        })
    }
}

impl SignalSource for ReplaySource {
    fn next_batch(&mut self) -> Option<SourceBatch> {
        self.rows.next()
    }
}
