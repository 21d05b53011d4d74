//! Offline scenario runs: the plant alone, windowed per channel, written as
//! an NDJSON session log.

use std::io::{self, Write};

use serde::Serialize;

use crate::config::{ScenarioConfig, SignalSpec};
use crate::plant::MachineState;
use crate::simulator::{ChannelFeed, CommandOrigin, SimError, Simulator};

/// A channel sampled at `fs_hz` and grouped into `window`-sample blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedChannel {
    pub spec: SignalSpec,
    pub fs_hz: f64,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionRow {
    State {
        t_us: i64,
        #[serde(flatten)]
        state: MachineState,
        origin: CommandOrigin,
        risk: f64,
    },
    Window {
        t_us: i64,
        node_id: String,
        channel: String,
        fs_hz: f64,
        samples: Vec<f64>,
    },
    Label {
        t_us: i64,
        second: u64,
        p: f64,
        label: u8,
    },
}

/// Runs the scenario to completion and returns its rows in emission order.
/// Rows from one step appear as: state changes, completed windows (channel
/// order), labels.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    channels: &[WindowedChannel],
) -> Result<Vec<SessionRow>, SimError> {
    if let Some(c) = channels.iter().find(|c| c.window == 0) {
        return Err(SimError::InvalidConfig(format!("{}: window is zero", c.spec.channel)));
    }
    let feeds = channels
        .iter()
        .map(|c| ChannelFeed {
            spec: c.spec.clone(),
            fs_hz: c.fs_hz,
        })
        .collect();
    let mut sim = Simulator::new(cfg.clone(), feeds)?;
    let mut pending: Vec<Vec<crate::Sample>> = vec![Vec::new(); channels.len()];
    let mut rows = Vec::new();
    while !sim.finished() {
        let out = sim.step(1_000_000);
        for c in out.changes {
            rows.push(SessionRow::State {
                t_us: c.t_us,
                state: c.state,
                origin: c.origin,
                risk: c.risk,
            });
        }
        for (i, batch) in out.samples.into_iter().enumerate() {
            pending[i].extend(batch);
            let w = channels[i].window;
            while pending[i].len() >= w {
                let block: Vec<_> = pending[i].drain(..w).collect();
                rows.push(SessionRow::Window {
                    t_us: block[0].t_us,
                    node_id: channels[i].spec.node_id.clone(),
                    channel: channels[i].spec.channel.clone(),
                    fs_hz: channels[i].fs_hz,
                    samples: block.iter().map(|s| s.value).collect(),
                });
            }
        }
        for l in out.labels {
            rows.push(SessionRow::Label {
                t_us: l.t_us,
                second: l.second,
                p: l.p,
                label: l.label,
            });
        }
    }
    Ok(rows)
}

pub fn write_ndjson<W: Write>(rows: &[SessionRow], mut w: W) -> io::Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
