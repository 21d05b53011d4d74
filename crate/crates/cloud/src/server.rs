//! HTTP front end: `POST /v1/ingest`, `GET /v1/sessions`, `GET /v1/export`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use crate::export::{export_dataset, ExportError, SessionFilter};
use crate::store::{IngestError, Store};

#[derive(Clone)]
struct AppState {
    store: Arc<Mutex<Store>>,
    root: PathBuf,
}

type Reply = (StatusCode, Json<Value>);

async fn ingest(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> Reply {
    let claimed = headers.get("x-batch-id").and_then(|v| v.to_str().ok());
    let mut store = s.store.lock().expect("store lock");
    match store.ingest(claimed, &body) {
        Ok((id, stored, duplicate)) => (
            StatusCode::OK,
            Json(json!({"ok": true, "batch_id": id, "stored": stored, "duplicate": duplicate})),
        ),
        Err(IngestError::MalformedBatch(reason)) => (
            StatusCode::BAD_REQUEST,
            Json(json!({"ok": false, "error": "MalformedBatch", "reason": reason})),
        ),
        Err(IngestError::Io(e)) => {
            log::error!("ingest: {e}");
            (
                StatusCode::INTERNAL_SERVER_ERROR,
                Json(json!({"ok": false, "error": "Io", "reason": e.to_string()})),
            )
        }
    }
}

async fn sessions(State(s): State<AppState>) -> Reply {
    let store = s.store.lock().expect("store lock");
    match store.sessions() {
        Ok(list) => (StatusCode::OK, Json(json!({ "sessions": list }))),
        Err(e) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({"error": "Io", "reason": e.to_string()})),
        ),
    }
}

async fn export(State(s): State<AppState>, Query(q): Query<HashMap<String, String>>) -> Reply {
    let filter = SessionFilter(q.get("session").cloned());
    // Hold the lock so the export never sees half of a batch.
    let _guard = s.store.lock().expect("store lock");
    match export_dataset(&s.root, &filter) {
        Ok(records) => (StatusCode::OK, Json(json!({ "records": records }))),
        Err(ExportError::NoSessions) => (
            StatusCode::NOT_FOUND,
            Json(json!({"error": "NoSessions"})),
        ),
        Err(e) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({"error": "Export", "reason": e.to_string()})),
        ),
    }
}

pub fn router(store: Store) -> Router {
    let root = store.root().to_path_buf();
    Router::new()
        .route("/v1/ingest", post(ingest))
        .route("/v1/sessions", get(sessions))
        .route("/v1/export", get(export))
        .with_state(AppState {
            store: Arc::new(Mutex::new(store)),
            root,
        })
}

/// A running sink on its own runtime thread.
pub struct CloudSink {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl CloudSink {
    pub fn start(root: impl Into<PathBuf>, addr: &str) -> std::io::Result<CloudSink> {
        let store = Store::open(root)?;
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let app = router(store);
        let thread = std::thread::Builder::new()
            .name("cloud-sink".into())
            .spawn(move || {
                rt.block_on(async move {
                    let l = match tokio::net::TcpListener::from_std(listener) {
                        Ok(l) => l,
                        Err(e) => {
                            log::error!("cloud sink listener: {e}");
                            return;
                        }
                    };
                    let r = axum::serve(l, app)
                        .with_graceful_shutdown(async {
                            let _ = rx.await;
                        })
                        .await;
                    if let Err(e) = r {
                        log::error!("cloud sink: {e}");
                    }
                })
            })?;
        Ok(CloudSink {
            addr: local,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.thread.take() {
            let _ = h.join();
        }
    }
}

impl Drop for CloudSink {
    fn drop(&mut self) {
        self.halt();
    }
}
