use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{FeatureMap, QualityError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityModel {
    pub version: String,
    pub feature_names: Vec<String>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub w: Vec<f64>,
    pub b: f64,
    pub threshold: f64,
    pub trained_on: String,
    pub created_at: String,
}

impl QualityModel {
    pub fn validate(&self) -> Result<(), QualityError> {
        let bad = |s: &str| Err(QualityError::InvalidModelFile(s.to_owned()));
        let n = self.feature_names.len();
        if n == 0 {
            return bad("feature_names is empty");
        }
        if self.w.len() != n || self.mu.len() != n || self.sigma.len() != n {
            return bad("w, mu, sigma and feature_names differ in length");
        }
        if self.sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("sigma must be positive");
        }
        if self
            .mu
            .iter()
            .chain(&self.w)
            .chain(std::iter::once(&self.b))
            .any(|v| !v.is_finite())
        {
            return bad("non-finite coefficient");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold outside [0,1]");
        }
        if self.version.is_empty() {
            return bad("version is empty");
        }
        let mut names = self.feature_names.clone();
        names.sort();
        names.dedup();
        if names.len() != n {
            return bad("duplicate feature name");
        }
        Ok(())
    }

    /// Standardized linear margin `Σ w_i (x_i − mu_i)/sigma_i + b`.
    pub fn margin(&self, features: &FeatureMap) -> Result<f64, QualityError> {
        let mut z = self.b;
        for (i, name) in self.feature_names.iter().enumerate() {
            let x = *features
                .get(name)
                .ok_or_else(|| QualityError::MissingFeature(name.clone()))?;
            z += self.w[i] * (x - self.mu[i]) / self.sigma[i];
        }
        Ok(z)
    }

    /// First feature name absent from `features`, if any.
    pub fn missing_feature(&self, features: &FeatureMap) -> Option<&str> {
        self.feature_names
            .iter()
            .find(|n| !features.contains_key(*n))
            .map(String::as_str)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn predict_risk(model: &QualityModel, features: &FeatureMap) -> Result<f64, QualityError> {
    Ok(sigmoid(model.margin(features)?))
}

pub fn save_model(model: &QualityModel, path: &Path) -> Result<(), QualityError> {
    model.validate()?;
    let mut text = serde_json::to_string_pretty(model).expect("model serializes");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn parse_model(bytes: &[u8]) -> Result<QualityModel, QualityError> {
    let m: QualityModel = serde_json::from_slice(bytes)
        .map_err(|e| QualityError::InvalidModelFile(e.to_string()))?;
    m.validate()?;
    Ok(m)
}

pub fn load_model(path: &Path) -> Result<QualityModel, QualityError> {
    let bytes = std::fs::read(path)
        .map_err(|e| QualityError::InvalidModelFile(format!("{}: {e}", path.display())))?;
    parse_model(&bytes)
}
