//! Per-window processing in the three modes.

use dsm_core::dsp::{decimate, dominant_frequency, window_features, DspError};
use dsm_core::{Payload, ProcessingMode};

/// Below this many samples the spectral peak is not computed.
pub const MIN_SPECTRAL_WINDOW: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub payload: Payload,
    /// Sum over computed features of (samples read / window length).
    pub feature_work: f64,
}

fn dom_freq(x: &[f64], fs_hz: f64) -> Result<Option<f64>, DspError> {
    if x.len() < MIN_SPECTRAL_WINDOW {
        return Ok(None);
    }
    match dominant_frequency(x, fs_hz) {
        Ok(f) => Ok(Some(f)),
        Err(DspError::AllZeroSignal) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Turns one window of engineering-unit samples into a payload.
///
/// Hybrid windows carry the block-mean decimated samples plus the shape
/// features of the full window; the spectral peak is taken from the
/// decimated stream at `fs_hz / factor`.
pub fn apply_mode(
    window: &[f64],
    mode: ProcessingMode,
    factor: usize,
    fs_hz: f64,
) -> Result<Processed, DspError> {
    match mode {
        ProcessingMode::Raw => Ok(Processed {
            payload: Payload::Raw(window.to_vec()),
            feature_work: 0.0,
        }),
        ProcessingMode::Features => {
            let mut f = window_features(window)?;
            f.dom_freq_hz = dom_freq(window, fs_hz)?;
            let map = f.to_map();
            Ok(Processed {
                feature_work: map.len() as f64,
                payload: Payload::Features(map),
            })
        }
        ProcessingMode::Hybrid => {
            let mut f = window_features(window)?;
            let raw = decimate(window, factor)?;
            f.dom_freq_hz = dom_freq(&raw, fs_hz / factor as f64)?;
            let spectral = if f.dom_freq_hz.is_some() {
                raw.len() as f64 / window.len() as f64
            } else {
                0.0
            };
            Ok(Processed {
                feature_work: 6.0 + spectral,
                payload: Payload::Hybrid {
                    raw,
                    features: f.to_map(),
                },
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::EnergyModel;
    use std::f64::consts::PI;

    fn tone(n: usize, fs: f64, f: f64) -> Vec<f64> {
        (0..n)
            .map(|i| 0.1 + (2.0 * PI * f * i as f64 / fs).sin())
            .collect()
    }

    #[test]
    fn value_counts_per_mode() {
        let x = tone(256, 1000.0, 200.0);
        let raw = apply_mode(&x, ProcessingMode::Raw, 8, 1000.0).unwrap();
        assert_eq!(raw.payload.value_count(), 256);
        let feat = apply_mode(&x, ProcessingMode::Features, 8, 1000.0).unwrap();
        assert_eq!(feat.payload.value_count(), 7);
        let hyb = apply_mode(&x, ProcessingMode::Hybrid, 8, 1000.0).unwrap();
        assert_eq!(hyb.payload.value_count(), 32 + 7);
    }

    #[test]
    fn cpu_ordering_matches_work_done() {
        let e = EnergyModel::default();
        let x = tone(256, 1000.0, 200.0);
        let cost = |m| {
            let p = apply_mode(&x, m, 8, 1000.0).unwrap();
            e.cpu_cost(256, p.feature_work)
        };
        let (c1, c2, c3) = (
            cost(ProcessingMode::Raw),
            cost(ProcessingMode::Features),
            cost(ProcessingMode::Hybrid),
        );
        assert_eq!(c1, 256.0);
        assert_eq!(c2, 256.0 + 7.0 * 50.0);
        assert!(c1 < c3 && c3 < c2, "{c1} {c3} {c2}");
    }

    #[test]
    fn short_and_silent_windows_skip_dom_freq() {
        let p = apply_mode(&[1.0, 2.0, 3.0], ProcessingMode::Features, 1, 10.0).unwrap();
        assert_eq!(p.payload.value_count(), 6);
        let p = apply_mode(&[0.0; 64], ProcessingMode::Features, 1, 10.0).unwrap();
        assert!(!p.payload.features().unwrap().contains_key("dom_freq"));
    }

    #[test]
    fn hybrid_requires_dividing_factor() {
        let x = tone(250, 1000.0, 50.0);
        assert!(apply_mode(&x, ProcessingMode::Hybrid, 8, 1000.0).is_err());
    }
}
