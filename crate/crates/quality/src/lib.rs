//! Defect-risk model for the trimming cell.
//!
//! L2-regularized logistic regression over standardized features, trained by
//! full-batch gradient descent. Scoring is a pure function of the model file.

pub mod dataset;
pub mod eval;
pub mod model;
pub mod recommend;
pub mod train;

use std::collections::BTreeMap;

pub use dataset::{build_dataset, split_by_session, Dataset, SessionRecord};
pub use eval::{accuracy, auc};
pub use model::{load_model, parse_model, predict_risk, save_model, sigmoid, QualityModel};
pub use recommend::{grid, recommend_parameters, Candidate, Recommendation};
pub use train::{fit, loss_and_gradient, train_logistic, FitOptions, FitReport, TrainConfig, Trained};

pub type FeatureMap = BTreeMap<String, f64>;

#[derive(Debug, thiserror::Error)]
pub enum QualityError {
    #[error("missing feature {0}")]
    MissingFeature(String),
    #[error("invalid model file: {0}")]
    InvalidModelFile(String),
    #[error("dataset has a single class")]
    SingleClass,
    #[error("too few records ({0}, need at least 20)")]
    TooFewRecords(usize),
    #[error("no usable features")]
    NoFeatures,
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, trace: Vec<f64> },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad hyperparameter: {0}")]
    BadHyperparameter(&'static str),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
