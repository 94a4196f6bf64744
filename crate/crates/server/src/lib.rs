//! Annotation service: a JSON-over-HTTP claim/lease queue of stage-1 and
//! stage-2 states, writing the same dataset files as the oracle path.
//! See `API.md` for the wire format.

pub mod client;
pub mod queue;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pam_core::pipeline::load_inference_log;
use pam_core::store::SCHEMA_VERSION;
use pam_core::PamError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use client::{ApiClient, ServiceAnnotator};
pub use queue::{
    Annotation, AnnotationTask, Clock, ManualClock, NewTask, Queue, QueueError, QueueErrorKind, QueuePaths,
    SystemClock, TaskKind, TaskStatus, LEASE_MS,
};

pub struct AppState {
    queue: Mutex<Queue>,
    replay_logs: Vec<PathBuf>,
}

impl AppState {
    /// Opens (or creates) the queue in `data_dir`. `replay_logs` are
    /// inference logs served under `/api/replay`.
    pub fn open(data_dir: &Path, replay_logs: Vec<PathBuf>, clock: Arc<dyn Clock>) -> Result<Arc<Self>, PamError> {
        std::fs::create_dir_all(data_dir)?;
        let queue = Queue::open(QueuePaths::in_dir(data_dir), clock)?;
        Ok(Arc::new(Self {
            queue: Mutex::new(queue),
            replay_logs,
        }))
    }

    fn queue(&self) -> std::sync::MutexGuard<'_, Queue> {
        self.queue.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Body of `POST /api/tasks/{id}/annotation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Submission {
    pub lease: String,
    pub annotation: Annotation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub v: u32,
    pub id: String,
    pub status: TaskStatus,
    /// Preference pairs the stored ranking yields (stage 2).
    pub pair_count: Option<usize>,
}

struct ApiError(StatusCode, QueueError);

impl From<QueueError> for ApiError {
    fn from(e: QueueError) -> Self {
        let status = match e.kind {
            QueueErrorKind::Invalid => StatusCode::BAD_REQUEST,
            QueueErrorKind::NotFound => StatusCode::NOT_FOUND,
            QueueErrorKind::StaleLease | QueueErrorKind::Conflict => StatusCode::CONFLICT,
            QueueErrorKind::Storage => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "v": SCHEMA_VERSION,
            "error": {"kind": self.1.kind, "field": self.1.field, "message": self.1.message},
        });
        (self.0, Json(body)).into_response()
    }
}

fn bad_request(field: Option<&str>, message: impl Into<String>) -> ApiError {
    ApiError(
        StatusCode::BAD_REQUEST,
        QueueError {
            kind: QueueErrorKind::Invalid,
            field: field.map(str::to_string),
            message: message.into(),
        },
    )
}

fn not_found(message: impl Into<String>) -> ApiError {
    ApiError(
        StatusCode::NOT_FOUND,
        QueueError {
            kind: QueueErrorKind::NotFound,
            field: None,
            message: message.into(),
        },
    )
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| bad_request(None, format!("malformed JSON body: {e}")))
}

async fn health(State(s): State<Arc<AppState>>) -> Json<Value> {
    let counts = s.queue().counts();
    Json(json!({"v": SCHEMA_VERSION, "status": "ok", "tasks": counts}))
}

#[derive(Deserialize)]
struct NextQuery {
    kind: Option<String>,
}

async fn next_task(State(s): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> Result<Json<Value>, ApiError> {
    let kind: TaskKind = q
        .kind
        .as_deref()
        .ok_or_else(|| bad_request(Some("kind"), "query parameter kind is required"))?
        .parse()
        .map_err(|e: String| bad_request(Some("kind"), e))?;
    Ok(Json(match s.queue().claim_next(kind)? {
        Some(t) => json!({"v": SCHEMA_VERSION, "task": t}),
        None => json!({"v": SCHEMA_VERSION, "task": null, "message": "none pending"}),
    }))
}

async fn create_task(State(s): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<Value>), ApiError> {
    let new: NewTask = parse_body(&body)?;
    let t = s.queue().enqueue(new)?;
    Ok((StatusCode::OK, Json(json!({"v": SCHEMA_VERSION, "task": t}))))
}

async fn get_task(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let t = s.queue().get(&id).ok_or_else(|| not_found(format!("no task {id}")))?;
    Ok(Json(json!({"v": SCHEMA_VERSION, "task": t})))
}

async fn submit(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<Ack>, ApiError> {
    let sub: Submission = parse_body(&body)?;
    let t = s.queue().submit(&id, &sub.lease, sub.annotation)?;
    let pair_count = match t.kind {
        TaskKind::Stage2Ranking => t.annotation.as_ref().map(|a| {
            pam_core::preference::build_pairs(&a.ranking(), &t.candidates, &t.obs).len()
        }),
        TaskKind::Stage1Optimal => None,
    };
    Ok(Json(Ack {
        v: SCHEMA_VERSION,
        id: t.id,
        status: t.status,
        pair_count,
    }))
}

async fn replay(State(s): State<Arc<AppState>>, UrlPath(episode): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let mut records = Vec::new();
    for p in &s.replay_logs {
        if !p.exists() {
            continue;
        }
        let log = load_inference_log(p).map_err(|e| ApiError::from(QueueError::from(e)))?;
        records.extend(log.into_iter().filter(|r| r.episode == episode));
    }
    if records.is_empty() {
        return Err(not_found(format!("no inference records for episode {episode}")));
    }
    records.sort_by_key(|r| r.step);
    Ok(Json(json!({"v": SCHEMA_VERSION, "episode": episode, "records": records})))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/tasks", post(create_task))
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}", get(get_task))
        .route("/api/tasks/{id}/annotation", post(submit))
        .route("/api/replay/{episode}", get(replay))
        .with_state(state)
}

/// Serves until the process exits.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Binds `addr` and serves on a fresh runtime, blocking the caller.
pub fn run_blocking(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("annotation service listening on http://{}", listener.local_addr()?);
        serve(listener, state).await
    })
}

/// Starts the service on a background thread bound to `addr` (port 0 picks
/// a free port) and returns the bound address.
pub fn spawn(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<SocketAddr> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let bound = std_listener.local_addr()?;
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
            if let Err(e) = serve(listener, state).await {
                log::error!("annotation service stopped: {e}");
            }
        });
    });
    Ok(bound)
}
