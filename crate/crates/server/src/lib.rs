//! HTTP front end for the session store.
//!
//! | route | purpose |
//! |---|---|
//! | `POST /post?sid=` | injection and lifecycle actions |
//! | `GET /go?sid=` | both snapshots and their flat diff |
//! | `GET /state?sid=` | the raw current snapshot |
//! | `POST /upload?sid=` | multipart file upload |
//! | `GET /files/{name}?sid=` | serves an upload back to its own session |
//!
//! Every error body carries `"success": false` and an `"error"` message.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gymsmith_core::diff_engine::{compute_diff, DiffReport, VolatileMask};
use gymsmith_core::session_store::{
    Clock, InjectionAction, SessionId, SessionStore, StoreConfig, StoreError, SystemClock, UploadRef,
};
use gymsmith_core::state_document::{StateId, StateValue};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_GC_INTERVAL: Duration = Duration::from_secs(60);
/// Multipart framing allowance on top of the upload quota.
const MULTIPART_OVERHEAD: usize = 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    store: SessionStore,
    clock: Arc<dyn Clock>,
    mask: VolatileMask,
}

impl AppState {
    pub fn new(config: StoreConfig, mask: VolatileMask, clock: Arc<dyn Clock>) -> Self {
        AppState { inner: Arc::new(Inner { store: SessionStore::new(config), clock, mask }) }
    }

    pub fn with_system_clock(config: StoreConfig, mask: VolatileMask) -> Self {
        AppState::new(config, mask, Arc::new(SystemClock::default()))
    }

    pub fn store(&self) -> &SessionStore {
        &self.inner.store
    }

    pub fn mask(&self) -> &VolatileMask {
        &self.inner.mask
    }

    /// Collects expired sessions as of the state's clock.
    pub fn collect_garbage(&self) -> usize {
        self.inner.store.gc_expired(self.inner.clock.now())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<StoreError> for ApiError {
    fn from(err: StoreError) -> Self {
        let status = match err {
            StoreError::QuotaExceeded { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, err.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "success": false, "error": self.message });
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct SidQuery {
    sid: Option<String>,
}

impl SidQuery {
    fn sid(&self) -> Result<SessionId, ApiError> {
        match &self.sid {
            None => Err(ApiError::bad_request("missing sid query parameter")),
            Some(raw) => Ok(SessionId::new(raw.as_str())?),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostRequest {
    pub action: String,
    #[serde(default)]
    pub state: Option<StateValue>,
    #[serde(default)]
    pub merge: Option<bool>,
}

impl PostRequest {
    /// `set_current` with `merge: true` is read as `merge`.
    pub fn resolve(&self) -> Result<InjectionAction, ApiError> {
        let action: InjectionAction = self.action.parse()?;
        match (action, self.merge) {
            (InjectionAction::SetCurrent, Some(true)) => Ok(InjectionAction::Merge),
            (InjectionAction::SetCurrent | InjectionAction::Merge, _) | (_, None | Some(false)) => Ok(action),
            (other, Some(true)) => Err(ApiError::bad_request(format!("merge flag is not valid with action {other}"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PostResponse {
    pub success: bool,
    pub sid: SessionId,
    pub state_id: StateId,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GoResponse {
    pub initial_state: Option<StateValue>,
    pub current_state: StateValue,
    pub state_diff: DiffReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StateResponse {
    pub stored_state: StateValue,
    pub has_custom_state: bool,
    pub sid: SessionId,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UploadResponse {
    pub files: Vec<UploadRef>,
}

pub fn router(state: AppState) -> Router {
    let upload_limit = state.store().config().upload_quota.saturating_add(MULTIPART_OVERHEAD);
    Router::new()
        .route("/post", post(handle_post))
        .route("/go", get(handle_go))
        .route("/state", get(handle_state))
        .route("/upload", post(handle_upload).layer(DefaultBodyLimit::max(upload_limit)))
        .route("/files/{name}", get(handle_file))
        .with_state(state)
}

async fn handle_post(
    State(app): State<AppState>,
    Query(query): Query<SidQuery>,
    body: Bytes,
) -> Result<Json<PostResponse>, ApiError> {
    let sid = query.sid()?;
    let request: PostRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))?;
    let action = request.resolve()?;
    let now = app.inner.clock.now();
    let outcome = app.store().apply_action(&sid, action, request.state, now)?;
    Ok(Json(PostResponse { success: outcome.success, sid: outcome.sid, state_id: outcome.state_id }))
}

async fn handle_go(State(app): State<AppState>, Query(query): Query<SidQuery>) -> Result<Json<GoResponse>, ApiError> {
    let sid = query.sid()?;
    let session = app.store().get_or_create(&sid, app.inner.clock.now());
    let state_diff = compute_diff(session.baseline(app.store().seed()), &session.current_snapshot, app.mask());
    Ok(Json(GoResponse {
        initial_state: session.initial_snapshot,
        current_state: session.current_snapshot,
        state_diff,
    }))
}

async fn handle_state(
    State(app): State<AppState>,
    Query(query): Query<SidQuery>,
) -> Result<Json<StateResponse>, ApiError> {
    let sid = query.sid()?;
    let session = app.store().get_or_create(&sid, app.inner.clock.now());
    Ok(Json(StateResponse { stored_state: session.current_snapshot, has_custom_state: session.has_custom_state, sid }))
}

async fn handle_upload(
    State(app): State<AppState>,
    Query(query): Query<SidQuery>,
    mut multipart: Multipart,
) -> Result<Json<UploadResponse>, ApiError> {
    let sid = query.sid()?;
    let mut files = Vec::new();
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::new(e.status(), e.body_text()))? {
        let Some(name) = field.file_name().map(str::to_owned) else {
            continue;
        };
        let media_type = match field.content_type() {
            Some(ct) if ct != "application/octet-stream" => ct.to_owned(),
            _ => mime_guess::from_path(&name).first_or_octet_stream().to_string(),
        };
        let content = field.bytes().await.map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        let now = app.inner.clock.now();
        files.push(app.store().store_upload(&sid, &name, content.to_vec(), &media_type, now)?);
    }
    if files.is_empty() {
        return Err(ApiError::bad_request("no file parts in multipart body"));
    }
    Ok(Json(UploadResponse { files }))
}

async fn handle_file(
    State(app): State<AppState>,
    Path(name): Path<String>,
    Query(query): Query<SidQuery>,
) -> Result<Response, ApiError> {
    let sid = query.sid()?;
    match app.store().fetch_upload(&sid, &name, app.inner.clock.now()) {
        Some(upload) => Ok(([(header::CONTENT_TYPE, upload.media_type)], upload.content).into_response()),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, format!("no upload {name:?} in session {sid}"))),
    }
}

/// Runs [`AppState::collect_garbage`] every `every` until the handle is aborted.
pub fn spawn_gc(state: AppState, every: Duration) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut ticker = tokio::time::interval(every);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        ticker.tick().await;
        loop {
            ticker.tick().await;
            let removed = state.collect_garbage();
            if removed > 0 {
                tracing::info!(removed, "collected expired sessions");
            }
        }
    })
}

/// Serves on `listener` until `shutdown` resolves, collecting garbage every `gc_interval`.
pub async fn serve<F>(listener: TcpListener, state: AppState, gc_interval: Duration, shutdown: F) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    let gc = spawn_gc(state.clone(), gc_interval);
    let result = axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await;
    gc.abort();
    result
}

pub async fn bind(addr: SocketAddr) -> std::io::Result<TcpListener> {
    let listener = TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "state service listening");
    Ok(listener)
}

/// Resolves on SIGINT or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut signal) => {
                signal.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = terminate => {},
    }
    tracing::info!("shutting down");
}
