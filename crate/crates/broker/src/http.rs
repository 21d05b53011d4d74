//! Plaintext metrics endpoint.

use std::sync::Arc;

use axum::routing::get;
use axum::Router;

use crate::metrics::Metrics;

/// Router exposing `GET /metrics`; callers may merge it into a larger app.
pub fn metrics_router(metrics: Arc<Metrics>) -> Router {
    Router::new().route(
        "/metrics",
        get(move || {
            let m = metrics.clone();
            async move {
                (
                    [("content-type", "text/plain; version=0.0.4")],
                    m.render_prometheus(),
                )
            }
        }),
    )
}
