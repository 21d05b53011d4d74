//! Gateway admin endpoint: broker metrics and model hot-swap.
//!
//! `GET /metrics` (Prometheus text), `GET /v1/model`, `POST /v1/model`
//! (body: a model file).

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::get;
use axum::{Json, Router};
use dsm_broker::Metrics;
use dsm_quality::parse_model;
use dsm_wires::{Control, ControlReply, Pipeline};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Clone)]
struct AdminState {
    pipeline: Arc<Pipeline>,
    score_stage: Option<String>,
    metrics: Arc<Metrics>,
    model_dir: PathBuf,
}

type Reply = (StatusCode, Json<Value>);

fn no_scorer() -> Reply {
    (StatusCode::NOT_FOUND, Json(json!({"error": "NoScoreStage"})))
}

async fn metrics_text(State(s): State<AdminState>) -> String {
    s.metrics.render_prometheus()
}

async fn active_model(State(s): State<AdminState>) -> Reply {
    let Some(stage) = s.score_stage.clone() else {
        return no_scorer();
    };
    let p = s.pipeline.clone();
    match tokio::task::spawn_blocking(move || p.control(&stage, Control::ActiveModel)).await {
        Ok(Ok(ControlReply::Model(v))) => (StatusCode::OK, Json(json!({"version": v}))),
        other => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({"error": "Gateway", "reason": format!("{other:?}")})),
        ),
    }
}

async fn deploy(State(s): State<AdminState>, body: Bytes) -> Reply {
    let Some(stage) = s.score_stage.clone() else {
        return no_scorer();
    };
    let model = match parse_model(&body) {
        Ok(m) => m,
        Err(e) => {
            return (
                StatusCode::BAD_REQUEST,
                Json(json!({"error": "InvalidModelFile", "reason": e.to_string()})),
            )
        }
    };
    let digest = hex::encode(Sha256::digest(&body));
    let path = s.model_dir.join(format!("{}.json", &digest[..16]));
    let written = std::fs::create_dir_all(&s.model_dir).and_then(|_| std::fs::write(&path, &body));
    if let Err(e) = written {
        return (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({"error": "Io", "reason": e.to_string()})),
        );
    }
    let p = s.pipeline.clone();
    match tokio::task::spawn_blocking(move || p.control(&stage, Control::ReloadModel(path))).await {
        Ok(Ok(ControlReply::Model(v))) => {
            log::info!("model {} deployed", model.version);
            (StatusCode::OK, Json(json!({"version": v})))
        }
        Ok(Ok(ControlReply::Error(e))) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(json!({"error": "ReloadFailed", "reason": e})),
        ),
        other => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({"error": "Gateway", "reason": format!("{other:?}")})),
        ),
    }
}

pub struct AdminServer {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl AdminServer {
    pub fn start(
        addr: &str,
        pipeline: Arc<Pipeline>,
        score_stage: Option<String>,
        metrics: Arc<Metrics>,
        model_dir: PathBuf,
    ) -> std::io::Result<AdminServer> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let app = Router::new()
            .route("/metrics", get(metrics_text))
            .route("/v1/model", get(active_model).post(deploy))
            .with_state(AdminState {
                pipeline,
                score_stage,
                metrics,
                model_dir,
            });
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(1)
            .enable_all()
            .build()?;
        let thread = std::thread::Builder::new().name("gateway-admin".into()).spawn(move || {
            rt.block_on(async move {
                let l = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("admin listener: {e}");
                        return;
                    }
                };
                let served = axum::serve(l, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
                if let Err(e) = served {
                    log::error!("admin server: {e}");
                }
            })
        })?;
        Ok(AdminServer {
            addr: local,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for AdminServer {
    fn drop(&mut self) {
        self.halt();
    }
}
