//! Local labeling service over the selected representatives.
//!
//! Readers share the session lock; label writes take it exclusively and
//! persist the store before answering. A propagation runs on the blocking
//! pool against a frozen copy of the labels, and a second trigger while one
//! is running is rejected with 409.

mod session;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use evfilter_client::{
    ErrorBody, LabelRequest, LabelResponse, PropagateResponse, PropagationState, QueueResponse, StatusResponse,
    Task,
};
use evfilter_core::dataset::LabelValue;
use evfilter_core::pipeline::{propagate_labels, ModelChoice, PipelineConfig, Prepared};
use evfilter_core::selection::SelectionRow;
use serde::Deserialize;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

pub use session::{Counts, LabelTask, Session, TaskStatus};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    Setup(String),
    #[error("unknown id `{0}`: not part of the selection")]
    UnknownId(String),
    #[error("label store: {0}")]
    Store(String),
    #[error("a propagation is already running")]
    Busy,
    #[error("insufficient labels: {0}")]
    InsufficientLabels(String),
    #[error("no image for `{0}`")]
    NoImage(String),
    #[error("propagation failed: {0}")]
    Propagation(String),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownId(_) => StatusCode::BAD_REQUEST,
            ServiceError::Busy => StatusCode::CONFLICT,
            ServiceError::InsufficientLabels(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::NoImage(_) => StatusCode::NOT_FOUND,
            ServiceError::Setup(_) | ServiceError::Store(_) | ServiceError::Propagation(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub model: ModelChoice,
    pub pipeline: PipelineConfig,
    pub seed: u64,
    /// JSON snapshot of submitted labels, rewritten after every submit.
    pub label_store: Option<PathBuf>,
    /// Receives the prediction files after each propagation.
    pub output_dir: Option<PathBuf>,
    /// Base directory for relative image paths in the manifest.
    pub media_root: PathBuf,
    /// Built UI bundle; a minimal built-in page is served without one.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            model: ModelChoice::Neural(evfilter_core::neural::ModelKind::NsageLin),
            pipeline: PipelineConfig::default(),
            seed: 0,
            label_store: None,
            output_dir: None,
            media_root: PathBuf::from("."),
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Propagation {
    Idle,
    Running,
    Done(PropagateResponse),
}

struct Shared {
    prepared: Arc<Prepared>,
    session: RwLock<Session>,
    propagation: Mutex<Propagation>,
    running: AtomicBool,
    config: ServiceConfig,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn new(prepared: Arc<Prepared>, selection: &[SelectionRow], config: ServiceConfig) -> Result<Self, ServiceError> {
        let session = Session::new(selection, &prepared.dataset, config.label_store.clone())?;
        Ok(Self(Arc::new(Shared {
            prepared,
            session: RwLock::new(session),
            propagation: Mutex::new(Propagation::Idle),
            running: AtomicBool::new(false),
            config,
        })))
    }

    pub fn counts(&self) -> Counts {
        self.0.session.read().expect("session lock").counts()
    }

    /// Last completed propagation, if any.
    pub fn last_metrics(&self) -> Option<PropagateResponse> {
        match *self.0.propagation.lock().expect("propagation lock") {
            Propagation::Done(m) => Some(m),
            _ => None,
        }
    }
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/api/queue", get(queue))
        .route("/api/labels", post(submit_label))
        .route("/api/status", get(status))
        .route("/api/propagate", post(propagate))
        .route("/media/{id}", get(media));
    let app = match &state.0.config.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(index)),
    };
    app.with_state(state)
}

/// Serves until the future is dropped or the listener fails.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Binds `addr` and returns the listener with its resolved address (useful
/// with port 0).
pub async fn bind(addr: SocketAddr) -> std::io::Result<(TcpListener, SocketAddr)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}

#[derive(Deserialize)]
struct QueueParams {
    limit: Option<usize>,
}

const DEFAULT_QUEUE_LIMIT: usize = 10;

async fn queue(State(state): State<AppState>, Query(params): Query<QueueParams>) -> Json<QueueResponse> {
    let session = state.0.session.read().expect("session lock");
    let tasks = session
        .next_batch(params.limit.unwrap_or(DEFAULT_QUEUE_LIMIT))
        .into_iter()
        .map(|t| Task {
            id: t.id.clone(),
            text: t.text.clone(),
            has_image: t.has_image,
            image_url: t.has_image.then(|| format!("/media/{}", t.id)),
            cluster: t.cluster,
            rank: t.rank,
        })
        .collect();
    Json(QueueResponse { tasks })
}

async fn submit_label(
    State(state): State<AppState>,
    Json(req): Json<LabelRequest>,
) -> Result<Json<LabelResponse>, ServiceError> {
    let remaining = state.0.session.write().expect("session lock").submit(&req.id, req.label)?;
    Ok(Json(LabelResponse { remaining }))
}

async fn status(State(state): State<AppState>) -> Json<StatusResponse> {
    let c = state.counts();
    let propagation = match *state.0.propagation.lock().expect("propagation lock") {
        Propagation::Idle => PropagationState::Idle,
        Propagation::Running => PropagationState::Running,
        Propagation::Done(_) => PropagationState::Done,
    };
    Json(StatusResponse {
        selected: c.selected,
        labeled: c.labeled,
        skipped: c.skipped,
        remaining: c.remaining,
        propagation,
    })
}

/// Clears the running flag however the propagation ends.
struct RunGuard<'a> {
    shared: &'a Shared,
    previous: Propagation,
    done: Option<PropagateResponse>,
}

impl Drop for RunGuard<'_> {
    fn drop(&mut self) {
        *self.shared.propagation.lock().expect("propagation lock") = match self.done {
            Some(m) => Propagation::Done(m),
            None => self.previous,
        };
        self.shared.running.store(false, Ordering::Release);
    }
}

async fn propagate(State(state): State<AppState>) -> Result<Json<PropagateResponse>, ServiceError> {
    let shared = &state.0;
    if shared.running.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err() {
        return Err(ServiceError::Busy);
    }
    let previous = std::mem::replace(&mut *shared.propagation.lock().expect("propagation lock"), Propagation::Running);
    let mut guard = RunGuard {
        shared,
        previous,
        done: None,
    };

    let labels = shared.session.read().expect("session lock").training_labels();
    check_labels(&labels)?;
    let prepared = Arc::clone(&shared.prepared);
    let config = shared.config.clone();
    let metrics = tokio::task::spawn_blocking(move || run_propagation(&prepared, &labels, &config))
        .await
        .map_err(|e| ServiceError::Propagation(e.to_string()))??;
    guard.done = Some(metrics);
    Ok(Json(metrics))
}

fn check_labels(labels: &[(usize, LabelValue)]) -> Result<(), ServiceError> {
    for class in [LabelValue::Relevant, LabelValue::Irrelevant] {
        if !labels.iter().any(|(_, l)| *l == class) {
            return Err(ServiceError::InsufficientLabels(format!("no sample labeled `{class}`")));
        }
    }
    Ok(())
}

fn run_propagation(
    prepared: &Prepared,
    labels: &[(usize, LabelValue)],
    config: &ServiceConfig,
) -> Result<PropagateResponse, ServiceError> {
    let outcome = propagate_labels(prepared, labels, config.model, &config.pipeline, config.seed)
        .map_err(|e| ServiceError::Propagation(e.to_string()))?;
    if let Some(dir) = &config.output_dir {
        outcome.write(prepared, dir).map_err(|e| ServiceError::Store(e.to_string()))?;
    }
    Ok(PropagateResponse {
        balanced_accuracy: outcome.test_balanced_accuracy,
        predicted_relevant: outcome.count(LabelValue::Relevant),
        predicted_irrelevant: outcome.count(LabelValue::Irrelevant),
    })
}

async fn media(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ServiceError> {
    let prepared = &state.0.prepared;
    let path = prepared
        .dataset
        .row_of(&id)
        .and_then(|r| prepared.dataset.records[r].image.as_deref())
        .map(|p| state.0.config.media_root.join(p))
        .ok_or_else(|| ServiceError::NoImage(id.clone()))?;
    let bytes = tokio::fs::read(&path).await.map_err(|_| ServiceError::NoImage(id))?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

fn content_type(path: &Path) -> &'static str {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

const INDEX_HTML: &str = r#"<!doctype html>
<html lang="en">
<head><meta charset="utf-8"><title>evfilter labeling</title></head>
<body>
<h1>evfilter labeling service</h1>
<p>No UI bundle is configured. The JSON API is available under <code>/api/</code>:
<code>GET /api/queue?limit=N</code>, <code>POST /api/labels</code>,
<code>GET /api/status</code>, <code>POST /api/propagate</code>.</p>
</body>
</html>
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_statuses() {
        assert_eq!(ServiceError::UnknownId("x".into()).status(), StatusCode::BAD_REQUEST);
        assert_eq!(ServiceError::Busy.status(), StatusCode::CONFLICT);
        assert_eq!(ServiceError::InsufficientLabels("x".into()).status(), StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(ServiceError::NoImage("x".into()).status(), StatusCode::NOT_FOUND);
    }

    #[test]
    fn missing_class_is_named() {
        let err = check_labels(&[(0, LabelValue::Irrelevant), (1, LabelValue::Irrelevant)]).unwrap_err();
        assert!(err.to_string().contains("relevant"), "{err}");
        assert!(check_labels(&[(0, LabelValue::Irrelevant), (1, LabelValue::Relevant)]).is_ok());
    }

    #[test]
    fn content_types() {
        assert_eq!(content_type(Path::new("a/b.JPG")), "image/jpeg");
        assert_eq!(content_type(Path::new("b.png")), "image/png");
        assert_eq!(content_type(Path::new("b")), "application/octet-stream");
    }
}
