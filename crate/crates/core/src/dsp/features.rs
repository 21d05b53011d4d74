use std::collections::BTreeMap;

use super::DspError;

/// Names used when a [`FeatureSet`] is flattened into a payload map.
pub const FEATURE_NAMES: [&str; 7] = ["min", "max", "mean", "rms", "p2p", "std", "dom_freq"];

/// Shape parameters of one window, in engineering units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureSet {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub rms: f64,
    pub p2p: f64,
    /// Population standard deviation.
    pub std: f64,
    pub dom_freq_hz: Option<f64>,
}

impl FeatureSet {
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        let mut m: BTreeMap<String, f64> = [
            ("min", self.min),
            ("max", self.max),
            ("mean", self.mean),
            ("rms", self.rms),
            ("p2p", self.p2p),
            ("std", self.std),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect();
        if let Some(f) = self.dom_freq_hz {
            m.insert("dom_freq".to_owned(), f);
        }
        m
    }
}

/// min/max/mean/rms/p2p/std over a window of at least two samples.
pub fn window_features(window: &[f64]) -> Result<FeatureSet, DspError> {
    let n = window.len();
    if n < 2 {
        return Err(DspError::WindowTooShort { got: n, need: 2 });
    }
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for &x in window {
        min = min.min(x);
        max = max.max(x);
        sum += x;
        sum_sq += x * x;
    }
    let nf = n as f64;
    // Rounding in the sum can push the mean one ulp outside [min, max].
    let mean = (sum / nf).clamp(min, max);
    let var = window.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    Ok(FeatureSet {
        min,
        max,
        mean,
        rms: (sum_sq / nf).sqrt(),
        p2p: max - min,
        std: var.sqrt(),
        dom_freq_hz: None,
    })
}

/// Block-mean decimation. `factor` must divide the window length.
pub fn decimate(window: &[f64], factor: usize) -> Result<Vec<f64>, DspError> {
    if factor == 0 || window.len() % factor != 0 {
        return Err(DspError::BadFactor {
            factor,
            len: window.len(),
        });
    }
    Ok(window
        .chunks_exact(factor)
        .map(|block| {
            let (lo, hi) = block
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
            (block.iter().sum::<f64>() / factor as f64).clamp(lo, hi)
        })
        .collect())
}
