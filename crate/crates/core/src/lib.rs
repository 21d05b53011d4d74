//! Shared vocabulary for the distributed smart measurement stack.
//!
//! - [`quantity`]: physical quantities and their canonical units
//! - [`topic`]: the `dsm/v1/<site>/<node>/<channel>/<kind>` topic grammar
//! - [`message`]: the canonical JSON measurement envelope
//! - [`descriptor`]: per-channel metadata registered against a topic
//! - [`dsp`]: the pre-processing kernels that run on the sensor node

pub mod descriptor;
pub mod dsp;
pub mod message;
pub mod quantity;
pub mod topic;

pub use descriptor::{validate_descriptor, ChannelDescriptor, DescriptorViolation, ValueRange};
pub use message::{
    decode_message, encode_message, EnvelopeError, FeatureMap, MeasurementMessage, Payload,
    ProcessingMode,
};
pub use quantity::{Quantity, QuantityKind, Unit};
pub use topic::{build_topic, parse_topic, TokenPosition, TopicError, TopicKind, TopicPath};

/// Token grammar shared by sites, node ids and channels: `[a-z0-9_-]{1,32}`.
pub fn is_valid_token(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 32
        && s
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

pub mod clock;
