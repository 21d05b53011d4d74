//! Channel descriptors: the per-topic metadata registered for each
//! transducer channel (quantity, range, sampling, processing mode, device).

use serde::{Deserialize, Serialize};

use crate::dsp::{AdcSpec, Calibration};
use crate::{ProcessingMode, Quantity, TopicKind, TopicPath};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueRange {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelDescriptor {
    /// Data topic for the channel (`raw` or `features` kind).
    pub topic: TopicPath,
    pub quantity: Quantity,
    pub range: ValueRange,
    pub fs_hz: f64,
    /// Samples per published window.
    pub window: u32,
    pub mode: ProcessingMode,
    #[serde(default)]
    pub sensor_model: String,
    #[serde(default)]
    pub location: String,
    /// Present for analog front ends; digital sensors report values directly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adc: Option<AdcSpec>,
    /// Defaults to a calibration spanning `range` over the ADC input span.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Calibration>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DescriptorViolation {
    RangeEmpty,
    WindowZero,
    SampleRateNotPositive,
    /// `window / fs_hz` is not a whole number of microseconds.
    CadenceNotIntegral,
    /// Descriptors register data channels; the topic must be `raw` or `features`.
    TopicKindNotData,
    BadAdc,
    BadCalibration,
}

impl ChannelDescriptor {
    pub fn channel(&self) -> &str {
        self.topic.channel()
    }

    /// Publish period in microseconds, if the cadence is integral.
    pub fn period_us(&self) -> Option<i64> {
        let p = self.window as f64 / self.fs_hz * 1e6;
        (p.is_finite() && p >= 1.0 && (p - p.round()).abs() < 1e-6).then(|| p.round() as i64)
    }

    pub fn effective_calibration(&self) -> Option<Calibration> {
        let adc = self.adc?;
        Some(
            self.calibration
                .unwrap_or_else(|| Calibration::spanning(&adc, self.range.min, self.range.max)),
        )
    }
}

/// Collects every violated invariant rather than stopping at the first.
pub fn validate_descriptor(d: &ChannelDescriptor) -> Result<(), Vec<DescriptorViolation>> {
    use DescriptorViolation::*;
    let mut v = Vec::new();
    if !(d.range.min < d.range.max) {
        v.push(RangeEmpty);
    }
    if d.window == 0 {
        v.push(WindowZero);
    }
    if !(d.fs_hz.is_finite() && d.fs_hz > 0.0) {
        v.push(SampleRateNotPositive);
    } else if d.window > 0 && d.period_us().is_none() {
        v.push(CadenceNotIntegral);
    }
    if !matches!(d.topic.kind(), TopicKind::Raw | TopicKind::Features) {
        v.push(TopicKindNotData);
    }
    if let Some(adc) = &d.adc {
        if adc.validate().is_err() {
            v.push(BadAdc);
        }
    }
    if let Some(cal) = &d.calibration {
        if cal.validate().is_err() {
            v.push(BadCalibration);
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}
