use serde::{Deserialize, Serialize};

use crate::SimError;

/// Vibration, airflow and environment response constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    /// Base vibration amplitude, m/s².
    pub a0: f64,
    /// Amplitude gain per mm/s of feed.
    pub a1: f64,
    /// Amplitude gain at full tool wear.
    pub a2: f64,
    /// Second-harmonic amplitude relative to the fundamental.
    pub harmonic2: f64,
    /// Additive vibration noise standard deviation, m/s².
    pub vib_noise_std: f64,
    pub airflow_nominal_m_s: f64,
    /// Airflow lost per unit of defect-episode severity, m/s.
    pub leak_per_severity_m_s: f64,
    pub airflow_noise_std: f64,
    /// Airflow temperature above ambient at zero feed, °C.
    pub air_temp_offset_c: f64,
    pub air_temp_per_feed_c: f64,
    pub air_temp_noise_std: f64,
    /// Tool wear gained per second of cutting, per mm/s of feed.
    pub wear_rate: f64,
    pub ambient_temp_c: f64,
    pub ambient_humidity_pct: f64,
    pub ambient_pressure_hpa: f64,
    /// Random-walk step standard deviations per second.
    pub temp_walk_std: f64,
    pub humidity_walk_std: f64,
    pub pressure_walk_std: f64,
    /// Walk bounds: ambient value ± this half-width.
    pub temp_band_c: f64,
    pub humidity_band_pct: f64,
    pub pressure_band_hpa: f64,
    pub ambient_noise_std: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            a0: 0.5,
            a1: 0.05,
            a2: 2.0,
            harmonic2: 0.3,
            vib_noise_std: 0.02,
            airflow_nominal_m_s: 4.0,
            leak_per_severity_m_s: 3.0,
            airflow_noise_std: 0.05,
            air_temp_offset_c: 2.0,
            air_temp_per_feed_c: 0.1,
            air_temp_noise_std: 0.05,
            wear_rate: 2e-5,
            ambient_temp_c: 22.0,
            ambient_humidity_pct: 45.0,
            ambient_pressure_hpa: 1013.0,
            temp_walk_std: 0.01,
            humidity_walk_std: 0.05,
            pressure_walk_std: 0.02,
            temp_band_c: 3.0,
            humidity_band_pct: 10.0,
            pressure_band_hpa: 5.0,
            ambient_noise_std: 0.01,
        }
    }
}

/// Coefficients of the ground-truth risk
/// `p = σ(c0 + c1·feed + c2·wear + c3·feed/(rpm/1000) + c4·severity − c5·airflow)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskCoefficients(pub [f64; 6]);

impl Default for RiskCoefficients {
    fn default() -> Self {
        RiskCoefficients([-6.0, 0.15, 3.0, 2.0, 4.0, 0.5])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectEpisode {
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub severity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineInit {
    pub spindle_rpm: f64,
    pub feed_mm_s: f64,
    #[serde(default)]
    pub tool_wear: f64,
    #[serde(default = "yes")]
    pub cutting: bool,
}

fn yes() -> bool {
    true
}

impl Default for MachineInit {
    fn default() -> Self {
        MachineInit {
            spindle_rpm: 12000.0,
            feed_mm_s: 20.0,
            tool_wear: 0.3,
            cutting: true,
        }
    }
}

/// A parameter change applied by the scenario script at `t_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledChange {
    pub t_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spindle_rpm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feed_mm_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutting: Option<bool>,
    /// Resets tool wear to zero.
    #[serde(default)]
    pub tool_change: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Vibration,
    AirSpeed,
    AirTemperature,
    AmbientTemperature,
    AmbientHumidity,
    AmbientPressure,
}

/// Which plant signal feeds a node channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    pub node_id: String,
    pub channel: String,
    pub kind: SignalKind,
    /// Multiplier on the signal (vibration axes differ in coupling).
    #[serde(default = "one")]
    pub gain: f64,
    #[serde(default)]
    pub phase_rad: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub site: String,
    pub seed: u64,
    pub duration_s: f64,
    /// Wall-clock origin of simulated time, µs since the Unix epoch.
    pub start_epoch_us: i64,
    #[serde(default = "default_base_rate")]
    pub base_rate_hz: u32,
    /// Noise generator identifier; only `chacha8-ziggurat` is defined.
    #[serde(default = "default_generator")]
    pub noise_generator: String,
    #[serde(default)]
    pub machine: MachineInit,
    #[serde(default)]
    pub plant: PlantParams,
    #[serde(default)]
    pub risk_coefficients: RiskCoefficients,
    #[serde(default)]
    pub defect_episodes: Vec<DefectEpisode>,
    #[serde(default)]
    pub schedule: Vec<ScheduledChange>,
    pub signals: Vec<SignalSpec>,
}

fn default_name() -> String {
    "scenario".into()
}

fn default_base_rate() -> u32 {
    1000
}

pub const NOISE_GENERATOR: &str = "chacha8-ziggurat";

fn default_generator() -> String {
    NOISE_GENERATOR.into()
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |s: String| Err(SimError::InvalidConfig(s));
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return bad("duration_s must be non-negative".into());
        }
        if self.start_epoch_us <= 0 {
            return bad("start_epoch_us must be positive".into());
        }
        if self.base_rate_hz == 0 || 1_000_000 % self.base_rate_hz != 0 {
            return bad("base_rate_hz must divide 1 MHz".into());
        }
        if self.noise_generator != NOISE_GENERATOR {
            return bad(format!("unknown noise generator {}", self.noise_generator));
        }
        for e in &self.defect_episodes {
            if !(0.0 <= e.t_start_s && e.t_start_s < e.t_end_s && e.t_end_s <= self.duration_s)
            {
                return bad(format!("episode {e:?} outside scenario duration"));
            }
            if !(0.0..=1.0).contains(&e.severity) {
                return bad(format!("episode severity {} outside [0,1]", e.severity));
            }
        }
        crate::plant::check_bounds(self.machine.spindle_rpm, self.machine.feed_mm_s)
            .map_err(|p| SimError::InvalidConfig(format!("initial {p} out of bounds")))?;
        if !(0.0..=1.0).contains(&self.machine.tool_wear) {
            return bad("tool_wear outside [0,1]".into());
        }
        for s in &self.schedule {
            if s.spindle_rpm.is_some_and(|r| !(crate::RPM_RANGE.0..=crate::RPM_RANGE.1).contains(&r))
                || s.feed_mm_s.is_some_and(|f| !(crate::FEED_RANGE.0..=crate::FEED_RANGE.1).contains(&f))
            {
                return bad(format!("scheduled change at {} s out of bounds", s.t_s));
            }
        }
        let mut keys: Vec<(&str, &str)> = self
            .signals
            .iter()
            .map(|s| (s.node_id.as_str(), s.channel.as_str()))
            .collect();
        keys.sort();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate signal (node_id, channel)".into());
        }
        Ok(())
    }

    /// Severity of the defect episode active at `t_s`, or 0.
    pub fn severity_at(&self, t_s: f64) -> f64 {
        self.defect_episodes
            .iter()
            .filter(|e| e.t_start_s <= t_s && t_s < e.t_end_s)
            .map(|e| e.severity)
            .fold(0.0, f64::max)
    }
}
