//! Built-in stage kinds.

use std::sync::Arc;

use crate::registry::StageFactory;

pub mod emitter;
pub mod feature;
pub mod join;
pub mod logger;
pub mod score;
pub mod subscriber;
pub mod threshold;
pub mod window;

pub use join::{JoinCore, JoinParams};

pub fn builtin_factories() -> Vec<Arc<dyn StageFactory>> {
    vec![
        Arc::new(subscriber::SubscriberFactory),
        Arc::new(window::WindowFactory),
        Arc::new(feature::FeatureFactory),
        Arc::new(join::JoinFactory),
        Arc::new(score::ScoreFactory),
        Arc::new(threshold::ThresholdFactory),
        Arc::new(emitter::EmitterFactory),
        Arc::new(logger::LoggerFactory),
    ]
}
