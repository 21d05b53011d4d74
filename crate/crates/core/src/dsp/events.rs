use serde::{Deserialize, Serialize};

use super::DspError;

/// Hysteresis band: rising fires at `>= rising`, falling at `< falling`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub rising: f64,
    pub falling: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Rising,
    Falling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub index: usize,
    pub kind: EventKind,
}

/// Threshold crossings with hysteresis. Each window starts in the "below"
/// state, so a window that opens above `rising` reports a rising event at 0.
pub fn detect_events(window: &[f64], th: Thresholds) -> Result<Vec<Event>, DspError> {
    if !(th.rising >= th.falling) {
        return Err(DspError::BadThresholds);
    }
    let mut above = false;
    let mut out = Vec::new();
    for (index, &x) in window.iter().enumerate() {
        if !above && x >= th.rising {
            above = true;
            out.push(Event {
                index,
                kind: EventKind::Rising,
            });
        } else if above && x < th.falling {
            above = false;
            out.push(Event {
                index,
                kind: EventKind::Falling,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    const TH: Thresholds = Thresholds {
        rising: 1.0,
        falling: 0.5,
    };

    #[test]
    fn ramp_crosses_once() {
        let x: Vec<f64> = (0..100).map(|i| i as f64 * 0.05).collect();
        let ev = detect_events(&x, TH).unwrap();
        assert_eq!(
            ev,
            vec![Event {
                index: 20,
                kind: EventKind::Rising
            }]
        );
    }

    #[test]
    fn quiet_signal_has_no_events() {
        assert!(detect_events(&[0.1; 50], TH).unwrap().is_empty());
    }

    #[test]
    fn inverted_band_is_rejected() {
        let th = Thresholds {
            rising: 0.0,
            falling: 1.0,
        };
        assert_eq!(detect_events(&[0.0], th), Err(DspError::BadThresholds));
    }

    /// Replays the hysteresis rule with an explicit two-state machine.
    fn replay(x: &[f64], th: Thresholds) -> Vec<(usize, bool)> {
        #[derive(PartialEq)]
        enum S {
            Low,
            High,
        }
        let mut s = S::Low;
        let mut out = vec![];
        for i in 0..x.len() {
            match s {
                S::Low => {
                    if x[i] >= th.rising {
                        s = S::High;
                        out.push((i, true));
                    }
                }
                S::High => {
                    if x[i] < th.falling {
                        s = S::Low;
                        out.push((i, false));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn noisy_square_wave_matches_state_machine() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..2000)
            .map(|i| if (i / 50) % 2 == 0 { 0.0 } else { 1.5 } + rng.random_range(-0.4..0.4))
            .collect();
        let ev = detect_events(&x, TH).unwrap();
        let oracle = replay(&x, TH);
        assert_eq!(ev.len(), oracle.len());
        for (e, (i, rising)) in ev.iter().zip(oracle) {
            assert_eq!(e.index, i);
            assert_eq!(e.kind == EventKind::Rising, rising);
        }
        // The band rejects the noise: one transition per half period.
        assert_eq!(ev.len(), 39);
    }
}
