use std::collections::BTreeSet;
use std::fmt;

use dsm_core::dsp::Thresholds;
use dsm_core::{is_valid_token, validate_descriptor, ChannelDescriptor, ProcessingMode};
use serde::{Deserialize, Serialize};

use crate::{ClockModel, EnergyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeChannel {
    pub descriptor: ChannelDescriptor,
    /// Hysteresis band for threshold events, in engineering units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<Thresholds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub node_id: String,
    pub site: String,
    /// Overrides the descriptor mode of every channel whose window can be
    /// processed (two samples or more).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ProcessingMode>,
    #[serde(default = "default_factor")]
    pub decimation_factor: u32,
    /// Seconds between clock-sync exchanges; zero disables sync.
    #[serde(default = "default_sync_period")]
    pub sync_period_s: f64,
    #[serde(default = "default_buffer")]
    pub buffer_capacity: usize,
    #[serde(default)]
    pub clock: ClockModel,
    #[serde(default)]
    pub energy: EnergyModel,
    pub channels: Vec<NodeChannel>,
}

fn default_factor() -> u32 {
    8
}

fn default_sync_period() -> f64 {
    10.0
}

fn default_buffer() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.join("; "))
    }
}

impl std::error::Error for ConfigError {}

/// Whether a channel of `window` samples can run in `mode` with decimation
/// `factor`. Every processable window must be divisible by the factor so
/// that a later switch to hybrid mode is always possible.
pub fn mode_supported(mode: ProcessingMode, window: u32, factor: u32) -> Result<(), String> {
    if window >= 2 && (factor == 0 || window % factor != 0) {
        return Err(format!("decimation factor {factor} does not divide window {window}"));
    }
    if mode != ProcessingMode::Raw && window < 2 {
        return Err(format!("window {window} too short for mode {}", mode.as_u8()));
    }
    Ok(())
}

impl NodeConfig {
    /// Mode a channel starts in.
    pub fn initial_mode(&self, ch: &ChannelDescriptor) -> ProcessingMode {
        match self.mode {
            Some(m) if ch.window >= 2 => m,
            _ => ch.mode,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Vec::new();
        if !is_valid_token(&self.node_id) {
            v.push(format!("node_id {:?} is not a valid token", self.node_id));
        }
        if !is_valid_token(&self.site) {
            v.push(format!("site {:?} is not a valid token", self.site));
        }
        if self.decimation_factor == 0 {
            v.push("decimation_factor must be positive".into());
        }
        if !(self.sync_period_s.is_finite() && self.sync_period_s >= 0.0) {
            v.push("sync_period_s must be non-negative".into());
        }
        if self.buffer_capacity == 0 {
            v.push("buffer_capacity must be positive".into());
        }
        if let Err(e) = self.clock.validate() {
            v.push(e);
        }
        if let Err(e) = self.energy.validate() {
            v.push(e);
        }
        if self.channels.is_empty() {
            v.push("node has no channels".into());
        }
        let mut seen = BTreeSet::new();
        for ch in &self.channels {
            let d = &ch.descriptor;
            let name = d.channel();
            if !seen.insert(name.to_owned()) {
                v.push(format!("channel {name} declared twice"));
            }
            if d.topic.site() != self.site || d.topic.node_id() != self.node_id {
                v.push(format!("channel {name}: topic {} belongs to another node", d.topic));
            }
            if let Err(errs) = validate_descriptor(d) {
                v.push(format!("channel {name}: {errs:?}"));
            }
            if let Err(e) = mode_supported(self.initial_mode(d), d.window, self.decimation_factor) {
                v.push(format!("channel {name}: {e}"));
            }
            if let Some(th) = ch.events {
                if !(th.rising >= th.falling) {
                    v.push(format!("channel {name}: rising threshold below falling"));
                }
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(v))
        }
    }
}
