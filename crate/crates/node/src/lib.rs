//! Sensor node runtime.
//!
//! A [`SensorNode`] accumulates samples per channel, closes windows at the
//! configured cadence, processes them in the channel's mode (raw, features
//! or hybrid), stamps them with its sync-corrected clock and publishes them
//! through a [`Transport`]. Messages that cannot be sent wait in a bounded
//! store-and-forward buffer.

pub mod clock;
pub mod command;
pub mod config;
pub mod energy;
pub mod node;
pub mod processing;
pub mod source;
pub mod transport;

pub use clock::{sync_exchange, ClockModel, SyncError, SyncEstimate};
pub use command::{Ack, Command};
pub use config::{ConfigError, NodeChannel, NodeConfig};
pub use energy::{EnergyModel, EnergyUse};
pub use node::{run_acquisition_loop, LogRow, NodeError, NodeStats, SensorNode};
pub use processing::{apply_mode, Processed, MIN_SPECTRAL_WINDOW};
pub use source::{FeedSource, ReplaySource, Sample, SignalSource, SourceBatch};
pub use transport::{LocalTransport, MqttTransport, Transport, TransportError};
