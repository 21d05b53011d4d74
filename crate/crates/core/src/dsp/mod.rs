//! On-node pre-processing: ADC simulation, engineering-unit conversion,
//! windowed shape features, dominant frequency, hysteresis events and
//! block-mean decimation.
//!
//! Everything here is a pure function over slices.

mod adc;
mod events;
mod features;
mod spectrum;

pub use adc::{quantize, to_engineering_units, AdcSpec, Calibration};
pub use events::{detect_events, Event, EventKind, Thresholds};
pub use features::{decimate, window_features, FeatureSet, FEATURE_NAMES};
pub use spectrum::{dominant_frequency, spectrum_magnitudes, NOISE_FLOOR};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DspError {
    #[error("invalid ADC spec: {0}")]
    BadAdcSpec(&'static str),
    #[error("code {code} at index {index} outside ADC range")]
    CodeOutOfRange { index: usize, code: u32 },
    #[error("calibration gain must be non-zero")]
    ZeroGain,
    #[error("window of {got} samples, need at least {need}")]
    WindowTooShort { got: usize, need: usize },
    #[error("sample rate must be positive")]
    BadSampleRate,
    #[error("no spectral bin above the noise floor")]
    AllZeroSignal,
    #[error("rising threshold below falling threshold")]
    BadThresholds,
    #[error("decimation factor {factor} invalid for {len} samples")]
    BadFactor { factor: usize, len: usize },
}
