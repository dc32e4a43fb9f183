//! Blinded review service.
//!
//! Reviewers authenticate with a static bearer token, pull packets one at a
//! time in their own shuffled order, and post verdicts. Every accepted
//! judgment is appended to a JSON-lines log and synced before the response
//! goes out; on start the service replays that log to rebuild its state.
//!
//! | method | path | caller | response |
//! |---|---|---|---|
//! | GET | `/health` | anyone | `{"version": ...}` |
//! | GET | `/next` | reviewer | packet, or `{"done": true}` |
//! | POST | `/judgment` | reviewer | `{"ok": true}`; 400 bad body, 404 unknown token, 409 conflicting verdict |
//! | GET | `/progress` | anyone | per-reviewer counts; per-bin counts for the owner |
//! | GET | `/export` | owner | the raw judgment log |

use std::future::Future;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;

use phenoaudit::audit::{Confidence, Verdict};
use phenoaudit::{Error, Result};

pub mod config;
pub mod state;

pub use config::{ReviewerEntry, ServiceConfig};
pub use state::{BinProgress, Caller, Progress, ReviewState, SubmitError, Submitted};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type SharedState = Arc<Mutex<ReviewState>>;

fn lock(state: &SharedState) -> MutexGuard<'_, ReviewState> {
    // A panic while holding the lock cannot leave a half-written judgment
    // in memory: the map is updated only after the log write succeeds.
    state.lock().unwrap_or_else(|e| e.into_inner())
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

fn caller(state: &ReviewState, headers: &HeaderMap) -> Option<Caller> {
    bearer(headers).and_then(|t| state.caller(t))
}

fn reviewer(state: &ReviewState, headers: &HeaderMap) -> std::result::Result<usize, Response> {
    match caller(state, headers) {
        Some(Caller::Reviewer(r)) => Ok(r),
        _ => Err(error(StatusCode::UNAUTHORIZED, "unknown reviewer token")),
    }
}

async fn health() -> Response {
    Json(json!({ "version": VERSION })).into_response()
}

async fn next(State(state): State<SharedState>, headers: HeaderMap) -> Response {
    let state = lock(&state);
    let r = match reviewer(&state, &headers) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    match state.next(r) {
        Some(packet) => Json(packet).into_response(),
        None => Json(json!({ "done": true })).into_response(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JudgmentBody {
    token: String,
    verdict: Verdict,
    confidence: Confidence,
}

async fn judgment(State(state): State<SharedState>, headers: HeaderMap, body: String) -> Response {
    let mut state = lock(&state);
    let r = match reviewer(&state, &headers) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let body: JudgmentBody = match serde_json::from_str(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid judgment: {e}")),
    };
    let now = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    match state.submit(r, &body.token, body.verdict, body.confidence, now) {
        Ok(_) => Json(json!({ "ok": true })).into_response(),
        Err(SubmitError::UnknownToken) => error(StatusCode::NOT_FOUND, "unknown packet token"),
        Err(SubmitError::Conflict) => error(
            StatusCode::CONFLICT,
            "a different judgment for this packet is already recorded",
        ),
        Err(SubmitError::Storage(e)) => {
            tracing::error!(error = %e, "judgment log write failed");
            error(StatusCode::INTERNAL_SERVER_ERROR, "judgment was not recorded")
        }
    }
}

async fn progress(State(state): State<SharedState>, headers: HeaderMap) -> Response {
    let state = lock(&state);
    let owner = caller(&state, &headers) == Some(Caller::Owner);
    Json(state.progress(owner)).into_response()
}

async fn export(State(state): State<SharedState>, headers: HeaderMap) -> Response {
    let state = lock(&state);
    match caller(&state, &headers) {
        Some(Caller::Owner) => match state.export() {
            Ok(text) => ([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response(),
            Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        },
        Some(Caller::Reviewer(_)) => error(StatusCode::FORBIDDEN, "export needs the owner token"),
        None => error(StatusCode::UNAUTHORIZED, "missing or unknown token"),
    }
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/next", get(next))
        .route("/judgment", post(judgment))
        .route("/progress", get(progress))
        .route("/export", get(export))
        .with_state(state)
}

/// A bound, not yet running service.
pub struct Server {
    listener: TcpListener,
    state: SharedState,
}

impl Server {
    /// Load packets, replay the log, and bind. Fails before accepting any
    /// connection if the inputs are unreadable or the port is taken.
    pub async fn bind(config: &ServiceConfig) -> Result<Server> {
        let state = ReviewState::open(config)?;
        let listener = TcpListener::bind(&config.bind)
            .await
            .map_err(|e| Error::io(format!("bind {}", config.bind), e))?;
        Ok(Server {
            listener,
            state: Arc::new(Mutex::new(state)),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    pub fn state(&self) -> SharedState {
        self.state.clone()
    }

    pub async fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
        tracing::info!(addr = %self.local_addr(), "review service listening");
        axum::serve(self.listener, router(self.state))
            .with_graceful_shutdown(shutdown)
            .await
    }
}
