//! Mock enterprise sink.
//!
//! Gateways POST batches of NDJSON records; the batch id is the SHA-256 of
//! the body, so a retried batch is acknowledged without being stored twice.
//! Records land in one NDJSON file per session and can be exported as a
//! labeled training dataset.

pub mod client;
pub mod export;
pub mod server;
pub mod store;

pub use client::{BatchTransport, CloudError, HttpTransport, IngestAck, Uploader};
pub use export::{export_dataset, write_export, ExportError, SessionFilter};
pub use server::CloudSink;
pub use store::{batch_id, CloudRecord, IngestError, SessionInfo, Store, LABEL_CHANNEL};
