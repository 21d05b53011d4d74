//! Clock-sync responder. Nodes publish `{"t1":..}` on their `_node/sync`
//! topic; the gateway answers on the same topic with its receive (`t2`) and
//! send (`t3`) times. The gateway clock is the reference.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use dsm_core::clock::Clock;
use serde::{Deserialize, Serialize};

use crate::broker::{Broker, BrokerError, LocalOptions};
use crate::codec::QoS;
use crate::metrics::inc;

pub const SYNC_FILTER: &str = "dsm/v1/+/+/_node/sync";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncRequest {
    pub t1: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncResponse {
    pub t1: i64,
    pub t2: i64,
    pub t3: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum SyncMessage {
    Response(SyncResponse),
    Request(SyncRequest),
}

impl SyncMessage {
    pub fn parse(payload: &[u8]) -> Option<SyncMessage> {
        serde_json::from_slice(payload).ok()
    }
}

/// Builds the response for one request payload. `Ok(None)` for payloads
/// that are themselves responses (the responder sees its own output).
pub fn answer(payload: &[u8], clock: &dyn Clock) -> Result<Option<Vec<u8>>, ()> {
    match SyncMessage::parse(payload) {
        Some(SyncMessage::Request(SyncRequest { t1 })) => {
            let t2 = clock.now_us();
            let t3 = clock.now_us().max(t2);
            Ok(Some(
                serde_json::to_vec(&SyncResponse { t1, t2, t3 }).expect("serialize sync response"),
            ))
        }
        Some(SyncMessage::Response(_)) => Ok(None),
        None => Err(()),
    }
}

pub struct SyncResponder {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl SyncResponder {
    pub fn spawn(broker: &Broker, clock: Arc<dyn Clock>) -> Result<SyncResponder, BrokerError> {
        let client = broker.local_client("_gateway-sync", LocalOptions::default())?;
        client.subscribe(SYNC_FILTER, QoS::AtLeastOnce)?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let metrics = broker.metrics().clone();
        let handle = thread::Builder::new()
            .name("sync-responder".into())
            .spawn(move || {
                while !stop2.load(Ordering::SeqCst) {
                    let Ok(d) = client.receiver().recv_timeout(Duration::from_millis(50)) else {
                        if client.receiver().is_empty() && stop2.load(Ordering::SeqCst) {
                            break;
                        }
                        continue;
                    };
                    match answer(&d.payload, clock.as_ref()) {
                        Ok(Some(resp)) => {
                            inc(&metrics.sync_requests);
                            let _ = client.publish_nowait(&d.topic, resp, d.qos);
                        }
                        Ok(None) => {}
                        Err(()) => inc(&metrics.sync_malformed),
                    }
                }
            })?;
        Ok(SyncResponder {
            stop,
            handle: Some(handle),
        })
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for SyncResponder {
    fn drop(&mut self) {
        self.halt();
    }
}
