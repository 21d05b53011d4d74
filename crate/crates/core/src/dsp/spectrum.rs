use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::DspError;

/// Magnitudes at or below this are treated as numerical zero.
pub const NOISE_FLOOR: f64 = 1e-12;

/// DFT magnitudes of the mean-removed, Hann-windowed signal for bins
/// `0..=N/2`. Bin `k` sits at `k * fs / N`.
pub fn spectrum_magnitudes(window: &[f64]) -> Vec<f64> {
    let n = window.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = window.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = window
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let w = 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos());
            Complex::new((x - mean) * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..=n / 2].iter().map(|c| c.norm()).collect()
}

/// Center frequency of the strongest non-DC bin. Ties go to the lower bin.
pub fn dominant_frequency(window: &[f64], fs_hz: f64) -> Result<f64, DspError> {
    if window.len() < 8 {
        return Err(DspError::WindowTooShort {
            got: window.len(),
            need: 8,
        });
    }
    if !(fs_hz.is_finite() && fs_hz > 0.0) {
        return Err(DspError::BadSampleRate);
    }
    let mags = spectrum_magnitudes(window);
    let (bin, peak) = mags
        .iter()
        .enumerate()
        .skip(1)
        .fold((0, 0.0), |best, (k, &m)| if m > best.1 { (k, m) } else { best });
    if peak <= NOISE_FLOOR {
        return Err(DspError::AllZeroSignal);
    }
    Ok(bin as f64 * fs_hz / window.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tone(freqs: &[(f64, f64)], fs: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                freqs.iter().map(|(f, a)| a * (2.0 * PI * f * t).sin()).sum()
            })
            .collect()
    }

    /// Direct O(N^2) DFT of the same pre-processed signal.
    fn naive_magnitudes(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut mean = 0.0;
        for v in x {
            mean += v;
        }
        mean /= n as f64;
        let y: Vec<f64> = (0..n)
            .map(|i| (x[i] - mean) * 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
            .collect();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in y.iter().enumerate() {
                    let ang = -2.0 * PI * (k * i % n) as f64 / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn pure_integer_bin_tone_is_exact() {
        let x = tone(&[(50.0, 1.0)], 1000.0, 1000);
        assert_eq!(dominant_frequency(&x, 1000.0).unwrap(), 50.0);
    }

    #[test]
    fn constant_signal_has_no_peak() {
        assert_eq!(
            dominant_frequency(&[0.1; 1000], 1000.0),
            Err(DspError::AllZeroSignal)
        );
    }

    #[test]
    fn two_tones_pick_the_stronger() {
        let x = tone(&[(60.0, 1.0), (120.0, 0.3)], 1000.0, 500);
        let oracle = naive_magnitudes(&x);
        let k = (1..oracle.len())
            .max_by(|a, b| oracle[*a].partial_cmp(&oracle[*b]).unwrap())
            .unwrap();
        assert_eq!(k as f64 * 1000.0 / 500.0, 60.0);
        assert_eq!(dominant_frequency(&x, 1000.0).unwrap(), 60.0);
    }

    #[test]
    fn rejects_short_windows_and_bad_rates() {
        assert!(matches!(
            dominant_frequency(&[1.0; 7], 10.0),
            Err(DspError::WindowTooShort { .. })
        ));
        assert_eq!(dominant_frequency(&[1.0; 8], 0.0), Err(DspError::BadSampleRate));
    }

    #[test]
    fn fft_matches_naive_dft() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for n in [8usize, 17, 64, 100, 256, 333, 512] {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = spectrum_magnitudes(&x);
            let slow = naive_magnitudes(&x);
            let scale = slow.iter().cloned().fold(0.0, f64::max);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-9 * scale, "n={n}");
            }
        }
    }

    proptest! {
        #[test]
        fn amplitude_scaling_keeps_peak(k in 1usize..100, scale in 1e-3f64..1e3) {
            let n = 256;
            let fs = 1000.0;
            let f = k as f64 * fs / n as f64;
            let x = tone(&[(f, 1.0)], fs, n);
            let y: Vec<f64> = x.iter().map(|v| v * scale).collect();
            prop_assert_eq!(dominant_frequency(&x, fs).unwrap(), f);
            prop_assert_eq!(dominant_frequency(&y, fs).unwrap(), f);
        }
    }
}
