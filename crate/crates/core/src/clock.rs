//! Time sources. The gateway clock is the reference for node synchronization;
//! simulations swap in a [`VirtualClock`] so every timestamp is reproducible.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

pub trait Clock: Send + Sync {
    /// Microseconds since the Unix epoch.
    fn now_us(&self) -> i64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_us(&self) -> i64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_micros() as i64)
            .unwrap_or(0)
    }
}

/// Manually advanced clock shared between components of a simulation.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock(Arc<AtomicI64>);

impl VirtualClock {
    pub fn new(start_us: i64) -> Self {
        Self(Arc::new(AtomicI64::new(start_us)))
    }

    pub fn set(&self, t_us: i64) {
        self.0.store(t_us, Ordering::SeqCst);
    }

    pub fn advance(&self, dt_us: i64) -> i64 {
        self.0.fetch_add(dt_us, Ordering::SeqCst) + dt_us
    }
}

impl Clock for VirtualClock {
    fn now_us(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

impl<C: Clock + ?Sized> Clock for Arc<C> {
    fn now_us(&self) -> i64 {
        (**self).now_us()
    }
}
