//! How a node reaches the broker: over TCP, or in-process for simulations.

use std::time::Duration;

use dsm_broker::{Broker, BrokerError, ClientOptions, Delivery, LocalClient, LocalOptions, MqttClient, QoS};

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("not connected")]
    Disconnected,
    #[error(transparent)]
    Broker(#[from] BrokerError),
}

pub trait Transport: Send {
    fn publish(&mut self, topic: &str, payload: &[u8], qos: QoS) -> Result<(), TransportError>;
    /// Subscriptions are remembered and restored after a reconnect.
    fn subscribe(&mut self, filter: &str, qos: QoS) -> Result<(), TransportError>;
    fn try_recv(&mut self) -> Option<Delivery>;
    fn recv_timeout(&mut self, t: Duration) -> Option<Delivery>;
    /// Returns once everything published so far has been routed and every
    /// delivery routed to this client before that point is receivable.
    fn barrier(&mut self) -> Result<(), TransportError>;
    fn is_connected(&self) -> bool;
    fn reconnect(&mut self) -> Result<(), TransportError>;
}

pub struct MqttTransport {
    addr: String,
    opts: ClientOptions,
    client: Option<MqttClient>,
    subs: Vec<(String, QoS)>,
}

impl MqttTransport {
    /// Does not connect; the first [`Transport::reconnect`] does.
    pub fn new(addr: impl Into<String>, opts: ClientOptions) -> Self {
        MqttTransport {
            addr: addr.into(),
            opts,
            client: None,
            subs: Vec::new(),
        }
    }

    fn client(&mut self) -> Result<&MqttClient, TransportError> {
        if self.client.as_ref().is_some_and(|c| !c.is_connected()) {
            self.client = None;
        }
        self.client.as_ref().ok_or(TransportError::Disconnected)
    }

    fn check<T>(&mut self, r: Result<T, BrokerError>) -> Result<T, TransportError> {
        if r.is_err() {
            // Any failure leaves the session in an unknown state.
            if let Some(c) = self.client.take() {
                c.disconnect();
            }
        }
        Ok(r?)
    }
}

impl Transport for MqttTransport {
    fn publish(&mut self, topic: &str, payload: &[u8], qos: QoS) -> Result<(), TransportError> {
        let r = self.client()?.publish(topic, payload.to_vec(), qos);
        self.check(r)
    }

    fn subscribe(&mut self, filter: &str, qos: QoS) -> Result<(), TransportError> {
        self.subs.push((filter.to_owned(), qos));
        if self.client.is_some() {
            let r = self.client()?.subscribe(filter, qos);
            self.check(r)?;
        }
        Ok(())
    }

    fn try_recv(&mut self) -> Option<Delivery> {
        self.client.as_ref()?.deliveries().try_recv().ok()
    }

    fn recv_timeout(&mut self, t: Duration) -> Option<Delivery> {
        self.client.as_ref()?.deliveries().recv_timeout(t).ok()
    }

    fn barrier(&mut self) -> Result<(), TransportError> {
        let r = self.client()?.ping();
        self.check(r)
    }

    fn is_connected(&self) -> bool {
        self.client.as_ref().is_some_and(|c| c.is_connected())
    }

    fn reconnect(&mut self) -> Result<(), TransportError> {
        if let Some(c) = self.client.take() {
            c.disconnect();
        }
        let c = MqttClient::connect(self.addr.as_str(), self.opts.clone())?;
        for (f, q) in &self.subs {
            c.subscribe(f, *q)?;
        }
        self.client = Some(c);
        Ok(())
    }
}

/// In-process transport bound to a [`Broker`].
pub struct LocalTransport {
    broker: Broker,
    client_id: String,
    client: Option<LocalClient>,
    subs: Vec<(String, QoS)>,
}

impl LocalTransport {
    pub fn new(broker: &Broker, client_id: impl Into<String>) -> Self {
        LocalTransport {
            broker: broker.clone(),
            client_id: client_id.into(),
            client: None,
            subs: Vec::new(),
        }
    }

    fn client(&self) -> Result<&LocalClient, TransportError> {
        self.client.as_ref().ok_or(TransportError::Disconnected)
    }
}

impl Transport for LocalTransport {
    fn publish(&mut self, topic: &str, payload: &[u8], qos: QoS) -> Result<(), TransportError> {
        // Routing is asynchronous; `barrier` waits for it.
        Ok(self.client()?.publish_nowait(topic, payload.to_vec(), qos)?)
    }

    fn subscribe(&mut self, filter: &str, qos: QoS) -> Result<(), TransportError> {
        self.subs.push((filter.to_owned(), qos));
        if let Some(c) = &self.client {
            c.subscribe(filter, qos)?;
        }
        Ok(())
    }

    fn try_recv(&mut self) -> Option<Delivery> {
        self.client.as_ref()?.try_recv()
    }

    fn recv_timeout(&mut self, t: Duration) -> Option<Delivery> {
        self.client.as_ref()?.recv_timeout(t)
    }

    fn barrier(&mut self) -> Result<(), TransportError> {
        self.client()?;
        Ok(self.broker.barrier()?)
    }

    fn is_connected(&self) -> bool {
        self.client.is_some()
    }

    fn reconnect(&mut self) -> Result<(), TransportError> {
        self.client = None;
        let c = self
            .broker
            .local_client(&self.client_id, LocalOptions::default())?;
        for (f, q) in &self.subs {
            c.subscribe(f, *q)?;
        }
        self.client = Some(c);
        Ok(())
    }
}
