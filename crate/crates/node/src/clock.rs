//! Local oscillator model and the four-timestamp offset estimate.

use serde::{Deserialize, Serialize};

/// A node clock that runs `true_offset_us` ahead of the gateway at boot and
/// gains `drift_ppm` parts per million afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockModel {
    #[serde(default)]
    pub true_offset_us: i64,
    #[serde(default)]
    pub drift_ppm: f64,
    /// Correction accumulated from sync exchanges, added to local readings.
    #[serde(default)]
    pub applied_correction_us: i64,
}

pub const MAX_DRIFT_PPM: f64 = 500.0;

impl ClockModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.drift_ppm.is_finite() && self.drift_ppm.abs() <= MAX_DRIFT_PPM) {
            return Err(format!("drift_ppm must be within ±{MAX_DRIFT_PPM}"));
        }
        Ok(())
    }

    /// Raw oscillator reading at gateway time `true_us`, for a node booted at `boot_us`.
    pub fn local_us(&self, true_us: i64, boot_us: i64) -> i64 {
        let drift = (self.drift_ppm * 1e-6 * (true_us - boot_us) as f64).round() as i64;
        true_us + self.true_offset_us + drift
    }

    pub fn corrected_us(&self, true_us: i64, boot_us: i64) -> i64 {
        self.local_us(true_us, boot_us) + self.applied_correction_us
    }

    /// Folds a measured offset of the corrected clock into the correction.
    pub fn apply(&mut self, est: SyncEstimate) {
        self.applied_correction_us += est.offset_us;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncEstimate {
    /// Amount to add to the node clock to match the gateway.
    pub offset_us: i64,
    pub delay_us: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SyncError {
    #[error("non-causal timestamps: t4 before t1 or t3 before t2")]
    NonCausalTimestamps,
    #[error("no sync response within the timeout")]
    Timeout,
}

/// `t1` node send, `t2` gateway receive, `t3` gateway send, `t4` node receive.
/// The offset halves toward negative infinity so that it is exact whenever
/// the sum is even.
pub fn sync_exchange(t1: i64, t2: i64, t3: i64, t4: i64) -> Result<SyncEstimate, SyncError> {
    if t4 < t1 || t3 < t2 {
        return Err(SyncError::NonCausalTimestamps);
    }
    Ok(SyncEstimate {
        offset_us: ((t2 - t1) + (t3 - t4)).div_euclid(2),
        delay_us: (t4 - t1) - (t3 - t2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn textbook_exchange() {
        let e = sync_exchange(100, 110, 111, 105).unwrap();
        assert_eq!((e.offset_us, e.delay_us), (8, 4));
    }

    #[test]
    fn non_causal() {
        assert_eq!(
            sync_exchange(100, 110, 111, 99),
            Err(SyncError::NonCausalTimestamps)
        );
        assert_eq!(
            sync_exchange(100, 110, 109, 120),
            Err(SyncError::NonCausalTimestamps)
        );
    }

    #[test]
    fn drift_accumulates_linearly() {
        let c = ClockModel {
            true_offset_us: 1000,
            drift_ppm: 100.0,
            applied_correction_us: 0,
        };
        assert_eq!(c.local_us(0, 0), 1000);
        assert_eq!(c.local_us(10_000_000, 0), 10_000_000 + 1000 + 1000);
    }

    proptest! {
        /// With one-way delays `up` and `down`, the estimate is off by
        /// `(up - down) / 2` from the true offset.
        #[test]
        fn asymmetric_delay_error(
            theta in -1_000_000i64..1_000_000,
            up in 0i64..50_000,
            down in 0i64..50_000,
            hold in 0i64..1000,
            t1 in 0i64..1_000_000_000,
        ) {
            // Node clock = gateway clock - theta, so the correction is +theta.
            let t2 = t1 + theta + up;
            let t3 = t2 + hold;
            let t4 = t3 - theta + down;
            let e = sync_exchange(t1, t2, t3, t4).unwrap();
            let err2 = 2 * (e.offset_us - theta) - (up - down);
            prop_assert!(err2 == 0 || err2 == -1, "err2 {}", err2);
            prop_assert_eq!(e.delay_us, up + down);
        }
    }
}
