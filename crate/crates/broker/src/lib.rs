//! Embedded pub/sub broker speaking a subset of MQTT 3.1.1.
//!
//! The routing core ([`Broker`]) is a single thread that owns every session.
//! TCP connections ([`TcpServer`]) and in-process clients ([`LocalClient`])
//! feed it through ordered channels, so routing order is the order in which
//! the core receives events.

pub mod broker;
pub mod client;
pub mod codec;
pub mod filter;
pub mod http;
pub mod metrics;
pub mod server;
pub mod sync;

pub use broker::{Broker, BrokerConfig, BrokerError, Delivery, LocalClient, LocalOptions};
pub use client::{ClientOptions, MqttClient};
pub use codec::QoS;
pub use filter::{match_topic, TopicFilter};
pub use metrics::Metrics;
pub use server::TcpServer;
pub use sync::{SyncRequest, SyncResponder, SyncResponse, SYNC_FILTER};
