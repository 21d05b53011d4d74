//! Pure response functions of the simulated plant.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::config::{PlantParams, RiskCoefficients};
use crate::{FEED_RANGE, RPM_RANGE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MachineState {
    pub spindle_rpm: f64,
    pub feed_mm_s: f64,
    pub tool_wear: f64,
    pub vacuum_airflow_m_s: f64,
    pub cutting: bool,
}

impl MachineState {
    /// Chip load proxy `feed / (rpm/1000)`, the interaction term of the risk.
    pub fn chip_load(&self) -> f64 {
        self.feed_mm_s / (self.spindle_rpm / 1000.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub temp_c: f64,
    pub humidity_pct: f64,
    pub pressure_hpa: f64,
}

/// Returns the name of the first out-of-bounds parameter.
pub fn check_bounds(rpm: f64, feed: f64) -> Result<(), &'static str> {
    if !(RPM_RANGE.0..=RPM_RANGE.1).contains(&rpm) {
        return Err("spindle_rpm");
    }
    if !(FEED_RANGE.0..=FEED_RANGE.1).contains(&feed) {
        return Err("feed_mm_s");
    }
    Ok(())
}

/// `A = a0 (1 + a1 feed) (1 + a2 wear)`.
pub fn vibration_amplitude(p: &PlantParams, feed_mm_s: f64, tool_wear: f64) -> f64 {
    p.a0 * (1.0 + p.a1 * feed_mm_s) * (1.0 + p.a2 * tool_wear)
}

/// Noise-free vibration: fundamental at the rotation frequency plus a
/// second harmonic.
pub fn vibration_value(p: &PlantParams, amplitude: f64, spindle_rpm: f64, t_s: f64, phase: f64) -> f64 {
    let f_r = spindle_rpm / 60.0;
    amplitude * (2.0 * PI * f_r * t_s + phase).sin()
        + p.harmonic2 * amplitude * (4.0 * PI * f_r * t_s + phase).sin()
}

/// Vacuum airflow: nominal minus the leak caused by a defect episode.
pub fn airflow_speed(p: &PlantParams, severity: f64) -> f64 {
    (p.airflow_nominal_m_s - p.leak_per_severity_m_s * severity).max(0.0)
}

pub fn air_temperature(p: &PlantParams, ambient_c: f64, feed_mm_s: f64) -> f64 {
    ambient_c + p.air_temp_offset_c + p.air_temp_per_feed_c * feed_mm_s
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logit of the ground-truth defect probability.
pub fn risk_logit(c: &RiskCoefficients, s: &MachineState, severity: f64) -> f64 {
    let [c0, c1, c2, c3, c4, c5] = c.0;
    c0 + c1 * s.feed_mm_s + c2 * s.tool_wear + c3 * s.chip_load() + c4 * severity
        - c5 * s.vacuum_airflow_m_s
}

/// Probability that a second of cutting in this state produces a defect.
/// Environment does not enter the default plant truth.
pub fn ground_truth_risk(c: &RiskCoefficients, s: &MachineState, _env: &EnvState, severity: f64) -> f64 {
    if !s.cutting {
        return 0.0;
    }
    sigmoid(risk_logit(c, s, severity))
}
