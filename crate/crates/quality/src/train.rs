use crate::dataset::{build_dataset, split_by_session, SessionRecord};
use crate::eval::{accuracy, auc};
use crate::model::{sigmoid, QualityModel};
use crate::QualityError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2: f64,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            l2: 1e-3,
            epochs: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub w: Vec<f64>,
    pub b: f64,
    /// Loss before each update, followed by the final loss.
    pub trace: Vec<f64>,
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Regularized log loss and its gradient with respect to `(w, b)`.
pub fn loss_and_gradient(
    x: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    b: f64,
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (row, &yi) in x.iter().zip(y) {
        let z = b + row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
        // −[y ln σ(z) + (1−y) ln(1−σ(z))] = y·softplus(−z) + (1−y)·softplus(z)
        loss += yi * softplus(-z) + (1.0 - yi) * softplus(z);
        let r = sigmoid(z) - yi;
        for (g, a) in gw.iter_mut().zip(row) {
            *g += r * a;
        }
        gb += r;
    }
    let wsq: f64 = w.iter().map(|v| v * v).sum();
    for (g, wi) in gw.iter_mut().zip(w) {
        *g = *g / n + l2 * wi;
    }
    (loss / n + 0.5 * l2 * wsq, gw, gb / n)
}

/// Full-batch gradient descent from `w = 0, b = 0`.
pub fn train_logistic(
    x: &[Vec<f64>],
    y: &[f64],
    cfg: TrainConfig,
) -> Result<Trained, QualityError> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(QualityError::BadHyperparameter("lr must be positive"));
    }
    if !(cfg.l2 >= 0.0 && cfg.l2.is_finite()) {
        return Err(QualityError::BadHyperparameter("l2 must be non-negative"));
    }
    if x.is_empty() || x.len() != y.len() {
        return Err(QualityError::Shape(format!("{} rows vs {} labels", x.len(), y.len())));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(QualityError::Shape("ragged design matrix".into()));
    }
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (loss, gw, gb) = loss_and_gradient(x, y, &w, b, cfg.l2);
        trace.push(loss);
        if !loss.is_finite() {
            return Err(QualityError::NonFiniteLoss { epoch, trace });
        }
        if epoch == cfg.epochs {
            break;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * g;
        }
        b -= cfg.lr * gb;
    }
    Ok(Trained { w, b, trace })
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub train: TrainConfig,
    pub threshold: f64,
    pub split_seed: u64,
    pub feature_names: Option<Vec<String>>,
    pub version: String,
    pub trained_on: String,
    pub created_at: String,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: QualityModel,
    pub trace: Vec<f64>,
    pub train_rows: usize,
    pub test_rows: usize,
    /// Held-out AUC; `None` if the held-out split has a single class.
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub dropped: Vec<String>,
    /// Sessions held out for evaluation, sorted.
    pub test_sessions: Vec<String>,
}

/// Split by session, standardize on the training part, train, and score the
/// held-out part.
pub fn fit(records: &[SessionRecord], opts: &FitOptions) -> Result<FitReport, QualityError> {
    let (train, test) = split_by_session(records, opts.split_seed);
    let ds = build_dataset(&train, opts.feature_names.as_deref())?;
    let t = train_logistic(&ds.x, &ds.y, opts.train)?;
    let model = QualityModel {
        version: opts.version.clone(),
        feature_names: ds.feature_names.clone(),
        mu: ds.mu.clone(),
        sigma: ds.sigma.clone(),
        w: t.w,
        b: t.b,
        threshold: opts.threshold,
        trained_on: opts.trained_on.clone(),
        created_at: opts.created_at.clone(),
    };
    model.validate()?;
    let (auc_v, acc) = if test.is_empty() {
        (None, 0.0)
    } else {
        let (_, y) = ds.transform(&test)?;
        let scores: Vec<f64> = test
            .iter()
            .map(|r| crate::predict_risk(&model, &r.features))
            .collect::<Result<_, _>>()?;
        (auc(&scores, &y), accuracy(&scores, &y, 0.5))
    };
    Ok(FitReport {
        model,
        trace: t.trace,
        train_rows: train.len(),
        test_rows: test.len(),
        auc: auc_v,
        accuracy: acc,
        dropped: ds.dropped,
        test_sessions: test
            .iter()
            .map(|r| r.session_id.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_zero_start_has_zero_bias_gradient() {
        let x = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, -0.2], vec![2.0, 1.0]];
        let y = vec![1.0, 0.0, 1.0, 0.0];
        let (loss, _, gb) = loss_and_gradient(&x, &y, &[0.0, 0.0], 0.0, 0.0);
        assert_eq!(gb, 0.0);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_is_non_increasing_with_small_steps() {
        let x: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let f = i as f64;
                vec![(f * 0.7).sin(), (f * 0.3).cos(), f / 60.0 - 0.5]
            })
            .collect();
        let y: Vec<f64> = (0..60).map(|i| ((i * 7) % 5 < 2) as u8 as f64).collect();
        let t = train_logistic(&x, &y, TrainConfig { lr: 1e-3, l2: 1e-3, epochs: 500 }).unwrap();
        for w in t.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let x = vec![vec![1e200], vec![-1e200]];
        let y = vec![1.0, 0.0];
        match train_logistic(&x, &y, TrainConfig { lr: 1e300, l2: 1.0, epochs: 10 }) {
            Err(QualityError::NonFiniteLoss { trace, .. }) => assert!(!trace.is_empty()),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences(
            rows in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 3), 4..12),
            labels in proptest::collection::vec(any::<bool>(), 12),
            w in proptest::collection::vec(-1.5f64..1.5, 3),
            b in -1.0f64..1.0,
            l2 in 0.0f64..0.1,
        ) {
            let y: Vec<f64> = labels[..rows.len()].iter().map(|&v| v as u8 as f64).collect();
            let (_, gw, gb) = loss_and_gradient(&rows, &y, &w, b, l2);
            let eps = 1e-5;
            for j in 0..w.len() {
                let mut wp = w.clone();
                wp[j] += eps;
                let mut wm = w.clone();
                wm[j] -= eps;
                let fd = (loss_and_gradient(&rows, &y, &wp, b, l2).0
                    - loss_and_gradient(&rows, &y, &wm, b, l2).0) / (2.0 * eps);
                prop_assert!((fd - gw[j]).abs() < 1e-6, "w[{}]: {} vs {}", j, fd, gw[j]);
            }
            let fd_b = (loss_and_gradient(&rows, &y, &w, b + eps, l2).0
                - loss_and_gradient(&rows, &y, &w, b - eps, l2).0) / (2.0 * eps);
            prop_assert!((fd_b - gb).abs() < 1e-6);
        }
    }
}
