use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{FeatureMap, QualityError};

pub const MIN_RECORDS: usize = 20;

/// One labeled (or unlabeled) feature row, as exported by the cloud sink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRecord {
    pub session_id: String,
    pub t_us: i64,
    pub features: FeatureMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Standardized rows, columns in `feature_names` order.
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    /// Features removed because they were constant over the rows.
    pub dropped: Vec<String>,
}

impl Dataset {
    /// Standardizes more rows with this dataset's parameters.
    pub fn transform(&self, records: &[SessionRecord]) -> Result<(Vec<Vec<f64>>, Vec<f64>), QualityError> {
        let mut x = Vec::with_capacity(records.len());
        let mut y = Vec::with_capacity(records.len());
        for r in records {
            let mut row = Vec::with_capacity(self.feature_names.len());
            for (j, name) in self.feature_names.iter().enumerate() {
                let v = r
                    .features
                    .get(name)
                    .ok_or_else(|| QualityError::MissingFeature(name.clone()))?;
                row.push((v - self.mu[j]) / self.sigma[j]);
            }
            x.push(row);
            y.push(label_of(r)? as f64);
        }
        Ok((x, y))
    }
}

fn label_of(r: &SessionRecord) -> Result<u8, QualityError> {
    match r.label {
        Some(l @ (0 | 1)) => Ok(l),
        _ => Err(QualityError::Shape(format!(
            "record {}@{} has no 0/1 label",
            r.session_id, r.t_us
        ))),
    }
}

/// Builds a standardized design matrix. With `names = None`, the columns are
/// the features present in every record, in sorted order.
pub fn build_dataset(
    records: &[SessionRecord],
    names: Option<&[String]>,
) -> Result<Dataset, QualityError> {
    if records.len() < MIN_RECORDS {
        return Err(QualityError::TooFewRecords(records.len()));
    }
    let mut labels = BTreeSet::new();
    for r in records {
        labels.insert(label_of(r)?);
    }
    if labels.len() < 2 {
        return Err(QualityError::SingleClass);
    }
    let candidates: Vec<String> = match names {
        Some(n) => n.to_vec(),
        None => records[0]
            .features
            .keys()
            .filter(|k| records.iter().all(|r| r.features.contains_key(*k)))
            .cloned()
            .collect(),
    };
    let n = records.len() as f64;
    let mut feature_names = Vec::new();
    let mut mu = Vec::new();
    let mut sigma = Vec::new();
    let mut dropped = Vec::new();
    for name in candidates {
        let mut col = Vec::with_capacity(records.len());
        for r in records {
            let v = *r
                .features
                .get(&name)
                .ok_or_else(|| QualityError::MissingFeature(name.clone()))?;
            if !v.is_finite() {
                return Err(QualityError::Shape(format!("non-finite value for {name}")));
            }
            col.push(v);
        }
        let m = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let s = var.sqrt();
        if !(s > 1e-12 * m.abs().max(1.0)) {
            log::warn!("dropping constant feature {name}");
            dropped.push(name);
            continue;
        }
        feature_names.push(name);
        mu.push(m);
        sigma.push(s);
    }
    if feature_names.is_empty() {
        return Err(QualityError::NoFeatures);
    }
    let mut ds = Dataset {
        feature_names,
        mu,
        sigma,
        x: Vec::new(),
        y: Vec::new(),
        dropped,
    };
    let (x, y) = ds.transform(records)?;
    ds.x = x;
    ds.y = y;
    Ok(ds)
}

/// Fixed 80/20 split by session id: ids are sorted, shuffled with `seed`,
/// and the first 80% (at least one) become the training sessions.
pub fn split_by_session(
    records: &[SessionRecord],
    seed: u64,
) -> (Vec<SessionRecord>, Vec<SessionRecord>) {
    let mut ids: Vec<&str> = records
        .iter()
        .map(|r| r.session_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = if ids.len() <= 1 {
        ids.len()
    } else {
        ((ids.len() * 4 + 4) / 5).clamp(1, ids.len() - 1)
    };
    let train_ids: BTreeSet<&str> = ids[..n_train].iter().copied().collect();
    let (train, test): (Vec<_>, Vec<_>) = records
        .iter()
        .cloned()
        .partition(|r| train_ids.contains(r.session_id.as_str()));
    (train, test)
}
