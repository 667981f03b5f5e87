//! Review HTTP API over a run directory's manifest.
//!
//! Reads fold the manifest on every request; verdicts go through the
//! manifest's single writer, so the first verdict on a pair wins and later
//! ones get 409.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};
use uuid::Uuid;

use super::{summarize, Decision, Manifest, PairRecord, Status, Verdict};
use crate::error::{Error, Result};
use crate::world::ImageBuffer;

const DEFAULT_PAGE_SIZE: usize = 50;
const MAX_PAGE_SIZE: usize = 500;

struct AppState {
    run_root: PathBuf,
    manifest: Manifest,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Transition { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn lookup(state: &AppState, id: &str) -> ApiResult<PairRecord> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, format!("no pair {id}"));
    let uuid = Uuid::parse_str(id).map_err(|_| not_found())?;
    state.manifest.get(uuid)?.ok_or_else(not_found)
}

#[derive(Deserialize)]
struct ListQuery {
    status: Option<String>,
    iteration: Option<u32>,
    page: Option<usize>,
    page_size: Option<usize>,
}

#[derive(Serialize)]
struct ListResponse {
    total: usize,
    page: usize,
    page_size: usize,
    items: Vec<PairRecord>,
}

async fn list_pairs(State(state): State<Arc<AppState>>, Query(q): Query<ListQuery>) -> ApiResult<Json<ListResponse>> {
    let status = match q.status.as_deref().filter(|s| !s.is_empty()) {
        Some(s) => Some(Status::parse(s).ok_or_else(|| bad_request(format!("unknown status {s:?}")))?),
        None => None,
    };
    let page = q.page.unwrap_or(1).max(1);
    let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE).clamp(1, MAX_PAGE_SIZE);
    let matching: Vec<PairRecord> = state
        .manifest
        .latest_view()?
        .into_values()
        .filter(|r| status.is_none_or(|s| r.status == s))
        .filter(|r| q.iteration.is_none_or(|i| r.iteration == i))
        .collect();
    let total = matching.len();
    let items = matching
        .into_iter()
        .skip((page - 1) * page_size)
        .take(page_size)
        .collect();
    Ok(Json(ListResponse {
        total,
        page,
        page_size,
        items,
    }))
}

async fn get_pair(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<PairRecord>> {
    lookup(&state, &id).map(Json)
}

#[derive(Deserialize)]
struct PixelsQuery {
    which: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelsResponse {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f32>,
}

async fn get_pixels(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<PixelsQuery>,
) -> ApiResult<Json<PixelsResponse>> {
    let rec = lookup(&state, &id)?;
    let rel = match q.which.as_deref() {
        Some("before") => &rec.before_path,
        Some("after") => &rec.after_path,
        other => return Err(bad_request(format!("which must be before or after, got {other:?}"))),
    };
    let img = ImageBuffer::load_pgm(&state.run_root.join(rel))?;
    Ok(Json(PixelsResponse {
        h: img.height(),
        w: img.width(),
        pixels: img.pixels().to_vec(),
    }))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRequest {
    pub decision: Decision,
    pub reviewer: String,
    #[serde(default)]
    pub note: String,
}

async fn post_verdict(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<PairRecord>> {
    let req: VerdictRequest =
        serde_json::from_slice(&body).map_err(|e| bad_request(format!("malformed verdict: {e}")))?;
    let rec = lookup(&state, &id)?;
    let to = match req.decision {
        Decision::Accept => Status::Accepted,
        Decision::Reject => Status::Rejected,
    };
    if rec.status != Status::ReviewPending {
        return Err(ApiError(
            StatusCode::CONFLICT,
            format!("pair {id} is {}, not review_pending", rec.status),
        ));
    }
    // the writer re-checks under its lock, so a racing verdict becomes 409
    let verdict = Verdict::human(req.decision, req.reviewer, req.note);
    let updated = state.manifest.update_status(rec.id, to, Some(verdict))?;
    info!("pair {id} -> {to}");
    Ok(Json(updated))
}

async fn get_stats(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    let view = state.manifest.latest_view()?;
    Ok(Json(summarize(view.values())).into_response())
}

/// The review API for a run directory.
pub fn router(run_root: PathBuf, manifest: Manifest) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/api/pairs", get(list_pairs))
        .route("/api/pairs/{id}", get(get_pair))
        .route("/api/pairs/{id}/pixels", get(get_pixels))
        .route("/api/pairs/{id}/verdict", post(post_verdict))
        .route("/api/stats", get(get_stats))
        .layer(cors)
        .with_state(Arc::new(AppState { run_root, manifest }))
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| Error::io("<tokio runtime>", e))
}

/// Serves until the process exits.
pub fn serve(run_root: PathBuf, manifest: Manifest, addr: SocketAddr) -> Result<()> {
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::io(addr.to_string(), e))?;
        info!(
            "review API listening on http://{}",
            listener.local_addr().map_err(|e| Error::io(addr.to_string(), e))?
        );
        axum::serve(listener, router(run_root, manifest))
            .await
            .map_err(|e| Error::io(addr.to_string(), e))
    })
}

/// A review server on a background thread, stopped on drop.
pub struct ReviewServer {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ReviewServer {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub fn start(run_root: PathBuf, manifest: Manifest, addr: SocketAddr) -> Result<Self> {
        let rt = runtime()?;
        let listener = rt
            .block_on(tokio::net::TcpListener::bind(addr))
            .map_err(|e| Error::io(addr.to_string(), e))?;
        let bound = listener.local_addr().map_err(|e| Error::io(addr.to_string(), e))?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let app = router(run_root, manifest);
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async move {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self {
            addr: bound,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ReviewServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
