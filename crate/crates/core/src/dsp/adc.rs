use serde::{Deserialize, Serialize};

use super::DspError;

/// Analog-to-digital converter model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdcSpec {
    #[serde(default = "AdcSpec::default_bits")]
    pub bits: u32,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for AdcSpec {
    fn default() -> Self {
        Self {
            bits: 12,
            v_min: 0.0,
            v_max: 3.3,
        }
    }
}

impl AdcSpec {
    fn default_bits() -> u32 {
        12
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if !(1..=24).contains(&self.bits) {
            return Err(DspError::BadAdcSpec("bits must be in 1..=24"));
        }
        if !(self.v_min.is_finite() && self.v_max.is_finite() && self.v_min < self.v_max) {
            return Err(DspError::BadAdcSpec("v_min must be below v_max"));
        }
        Ok(())
    }

    /// Largest code, `2^bits - 1`.
    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Volts per code step.
    pub fn lsb(&self) -> f64 {
        (self.v_max - self.v_min) / self.max_code() as f64
    }
}

/// Linear conditioning chain: `value = gain * volts + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub gain: f64,
    #[serde(default)]
    pub offset: f64,
}

impl Calibration {
    pub fn validate(&self) -> Result<(), DspError> {
        if self.gain == 0.0 || !self.gain.is_finite() || !self.offset.is_finite() {
            return Err(DspError::ZeroGain);
        }
        Ok(())
    }

    /// Calibration that maps the full ADC input span onto `[lo, hi]`.
    pub fn spanning(adc: &AdcSpec, lo: f64, hi: f64) -> Self {
        let gain = (hi - lo) / (adc.v_max - adc.v_min);
        Self {
            gain,
            offset: lo - gain * adc.v_min,
        }
    }

    /// Volts the sensor front end produces for an engineering value.
    pub fn to_volts(&self, value: f64) -> f64 {
        (value - self.offset) / self.gain
    }
}

/// Round-to-nearest quantization with clipping at both rails. NaN maps to 0.
pub fn quantize(analog: &[f64], spec: &AdcSpec) -> Vec<u32> {
    let max = spec.max_code() as f64;
    let span = spec.v_max - spec.v_min;
    analog
        .iter()
        .map(|&v| {
            let code = ((v - spec.v_min) / span * max + 0.5).floor();
            if code.is_nan() {
                0
            } else {
                code.clamp(0.0, max) as u32
            }
        })
        .collect()
}

pub fn to_engineering_units(
    codes: &[u32],
    spec: &AdcSpec,
    cal: &Calibration,
) -> Result<Vec<f64>, DspError> {
    spec.validate()?;
    cal.validate()?;
    let max = spec.max_code();
    codes
        .iter()
        .enumerate()
        .map(|(index, &code)| {
            if code > max {
                return Err(DspError::CodeOutOfRange { index, code });
            }
            let v = spec.v_min + code as f64 / max as f64 * (spec.v_max - spec.v_min);
            Ok(cal.gain * v + cal.offset)
        })
        .collect()
}
