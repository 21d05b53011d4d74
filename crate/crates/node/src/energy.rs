//! Abstract energy accounting: CPU work for acquisition and feature
//! extraction, radio cost per transmitted byte.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyModel {
    #[serde(default = "defaults::cpu_sample")]
    pub cpu_sample: f64,
    #[serde(default = "defaults::cpu_feature")]
    pub cpu_feature: f64,
    #[serde(default = "defaults::radio_byte")]
    pub radio_byte: f64,
    /// Units available before the battery reads empty.
    #[serde(default = "defaults::budget")]
    pub budget: f64,
}

mod defaults {
    pub fn cpu_sample() -> f64 {
        1.0
    }
    pub fn cpu_feature() -> f64 {
        50.0
    }
    pub fn radio_byte() -> f64 {
        2.0
    }
    pub fn budget() -> f64 {
        1e9
    }
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            cpu_sample: defaults::cpu_sample(),
            cpu_feature: defaults::cpu_feature(),
            radio_byte: defaults::radio_byte(),
            budget: defaults::budget(),
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<(), String> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !(ok(self.cpu_sample) && ok(self.cpu_feature) && ok(self.radio_byte)) {
            return Err("energy coefficients must be finite and non-negative".into());
        }
        if !(self.budget.is_finite() && self.budget > 0.0) {
            return Err("energy budget must be positive".into());
        }
        Ok(())
    }

    /// `feature_work` is the sum over computed features of the fraction of
    /// the window each one reads.
    pub fn cpu_cost(&self, window_len: usize, feature_work: f64) -> f64 {
        self.cpu_sample * window_len as f64 + self.cpu_feature * feature_work
    }

    pub fn radio_cost(&self, bytes: usize) -> f64 {
        self.radio_byte * bytes as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyUse {
    pub cpu: f64,
    pub radio: f64,
}

impl EnergyUse {
    pub fn total(&self) -> f64 {
        self.cpu + self.radio
    }

    pub fn battery_fraction(&self, model: &EnergyModel) -> f64 {
        (1.0 - self.total() / model.budget).clamp(0.0, 1.0)
    }
}
