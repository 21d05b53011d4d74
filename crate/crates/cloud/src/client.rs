//! Gateway side of the uplink: content-addressed batches posted with retries.

use std::time::Duration;

use serde::Deserialize;

use crate::store::batch_id;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct IngestAck {
    pub batch_id: String,
    pub stored: usize,
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CloudError {
    /// The batch may or may not have arrived; retrying is safe.
    #[error("transport: {0}")]
    Transport(String),
    /// The sink refused the batch; retrying will not help.
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("gave up after {0} attempts")]
    Exhausted(u32),
}

pub trait BatchTransport: Send {
    fn post(&mut self, batch_id: &str, body: &[u8]) -> Result<IngestAck, CloudError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
}

impl HttpTransport {
    /// `base` is the sink root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(5)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            agent,
            url: format!("{}/v1/ingest", base.trim_end_matches('/')),
        }
    }
}

impl BatchTransport for HttpTransport {
    fn post(&mut self, batch_id: &str, body: &[u8]) -> Result<IngestAck, CloudError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("X-Batch-Id", batch_id)
            .header("Content-Type", "application/x-ndjson")
            .send(body)
            .map_err(|e| CloudError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| CloudError::Transport(e.to_string()))?;
        if status.is_success() {
            serde_json::from_str(&text).map_err(|e| CloudError::Transport(format!("bad ack: {e}")))
        } else if status.is_client_error() {
            Err(CloudError::Rejected(text))
        } else {
            Err(CloudError::Transport(format!("status {status}: {text}")))
        }
    }
}

/// Posts batches, retrying transport failures with linear backoff.
pub struct Uploader {
    transport: Box<dyn BatchTransport>,
    pub max_attempts: u32,
    pub backoff: Duration,
    pub batches_acked: u64,
    pub retries: u64,
}

impl Uploader {
    pub fn new(transport: Box<dyn BatchTransport>) -> Self {
        Uploader {
            transport,
            max_attempts: 20,
            backoff: Duration::from_millis(20),
            batches_acked: 0,
            retries: 0,
        }
    }

    /// Joins `lines` into one NDJSON body and posts it until acknowledged.
    pub fn send_lines(&mut self, lines: &[String]) -> Result<IngestAck, CloudError> {
        let mut body = String::new();
        for l in lines {
            body.push_str(l);
            body.push('\n');
        }
        self.send(body.as_bytes())
    }

    pub fn send(&mut self, body: &[u8]) -> Result<IngestAck, CloudError> {
        let id = batch_id(body);
        for attempt in 1..=self.max_attempts {
            match self.transport.post(&id, body) {
                Ok(ack) => {
                    self.batches_acked += 1;
                    return Ok(ack);
                }
                Err(CloudError::Transport(e)) => {
                    log::warn!("batch {} attempt {attempt} failed: {e}", &id[..12]);
                    self.retries += 1;
                    std::thread::sleep(self.backoff * attempt.min(10));
                }
                Err(e) => return Err(e),
            }
        }
        Err(CloudError::Exhausted(self.max_attempts))
    }
}
