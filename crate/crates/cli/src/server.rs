//! HTTP JSON chat API over an in-memory session store.
//!
//! Every body carries `"v": 1`.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | GET | `/v1/modes` | | `{v, modes}` |
//! | POST | `/v1/sessions` | `{v, mode, knowledge?, goal?}` | 201 session |
//! | GET | `/v1/sessions/{id}` | | session |
//! | DELETE | `/v1/sessions/{id}` | | 204 |
//! | POST | `/v1/sessions/{id}/turns` | `{v, text, debug?}` | `{v, id, reply, history_len, candidates?, trace?}` |
//!
//! Errors are `{v, error}` with 400 for bad bodies or modes and 404 for
//! unknown sessions. Everything else falls through to the static console
//! directory when one is configured.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use duet_core::task::{Goal, TurnTrace};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::chat::{reply, CandidateView, ChatSession, Mode, Utterance};
use crate::report::VERSION;
use crate::run::LoadedRun;

pub const DEFAULT_TTL: Duration = Duration::from_secs(30 * 60);

struct Entry {
    session: Arc<tokio::sync::Mutex<ChatSession>>,
    last_used: Instant,
}

/// Frozen runs by mode plus live sessions.
pub struct AppState {
    runs: BTreeMap<Mode, Arc<LoadedRun>>,
    sessions: Mutex<HashMap<String, Entry>>,
    ttl: Duration,
}

impl AppState {
    pub fn new(runs: Vec<LoadedRun>, ttl: Duration) -> anyhow::Result<Self> {
        let mut by_mode = BTreeMap::new();
        for r in runs {
            let mode = r.mode();
            if by_mode.insert(mode, Arc::new(r)).is_some() {
                anyhow::bail!("two runs serve {mode:?} mode");
            }
        }
        Ok(Self {
            runs: by_mode,
            sessions: Mutex::new(HashMap::new()),
            ttl,
        })
    }

    /// Drops expired sessions, then looks `id` up and refreshes it.
    fn touch(&self, id: &str) -> Option<Arc<tokio::sync::Mutex<ChatSession>>> {
        let mut map = self.sessions.lock().expect("session map lock");
        let now = Instant::now();
        map.retain(|_, e| now.duration_since(e.last_used) < self.ttl);
        let e = map.get_mut(id)?;
        e.last_used = now;
        Some(e.session.clone())
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map lock").len()
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"v": VERSION, "error": self.1}))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn not_found(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("unknown session `{id}`"))
}

/// Parses a JSON body; serde's message names the offending field.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let value: T = serde_json::from_slice(body).map_err(|e| bad_request(format!("invalid body: {e}")))?;
    Ok(value)
}

fn check_version(v: u32) -> Result<(), ApiError> {
    if v != VERSION {
        return Err(bad_request(format!("unsupported version {v}; expected {VERSION}")));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    v: u32,
    mode: Mode,
    #[serde(default)]
    knowledge: Vec<String>,
    #[serde(default)]
    goal: Option<Goal>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PostTurn {
    v: u32,
    text: String,
    #[serde(default)]
    debug: bool,
}

#[derive(Serialize)]
struct SessionView<'a> {
    v: u32,
    id: &'a str,
    mode: Mode,
    knowledge: &'a [String],
    goal: &'a Option<Goal>,
    history: &'a [Utterance],
    traces: &'a [TurnTrace],
}

fn view(s: &ChatSession) -> SessionView<'_> {
    SessionView {
        v: VERSION,
        id: &s.id,
        mode: s.mode,
        knowledge: &s.knowledge,
        goal: &s.goal,
        history: &s.history,
        traces: &s.traces,
    }
}

#[derive(Serialize)]
struct TurnView {
    v: u32,
    id: String,
    reply: String,
    history_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    candidates: Option<Vec<CandidateView>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<TurnTrace>,
}

async fn modes(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let modes: Vec<Mode> = app.runs.keys().copied().collect();
    Json(json!({"v": VERSION, "modes": modes}))
}

async fn create(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = parse(&body)?;
    check_version(req.v)?;
    if !app.runs.contains_key(&req.mode) {
        return Err(bad_request(format!("mode {:?} is not served", req.mode)));
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = ChatSession::new(id.clone(), req.mode, req.knowledge, req.goal);
    let body = serde_json::to_value(view(&session)).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    app.sessions.lock().expect("session map lock").insert(
        id,
        Entry {
            session: Arc::new(tokio::sync::Mutex::new(session)),
            last_used: Instant::now(),
        },
    );
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn fetch(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let s = app.touch(&id).ok_or_else(|| not_found(&id))?;
    let s = s.lock().await;
    Ok(Json(view(&s)).into_response())
}

async fn close(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    app.touch(&id).ok_or_else(|| not_found(&id))?;
    app.sessions.lock().expect("session map lock").remove(&id);
    Ok(StatusCode::NO_CONTENT)
}

async fn turn(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Json<TurnView>, ApiError> {
    let session = app.touch(&id).ok_or_else(|| not_found(&id))?;
    let req: PostTurn = parse(&body)?;
    check_version(req.v)?;
    if req.text.trim().is_empty() {
        return Err(bad_request("text must not be empty"));
    }
    // Holding the session lock for the whole turn serializes its requests.
    let mut guard = session.lock_owned().await;
    let run = app.runs.get(&guard.mode).cloned().ok_or_else(|| bad_request("mode is no longer served"))?;
    let out = tokio::task::spawn_blocking(move || {
        let r = reply(&run, &mut guard, &req.text);
        r.map(|r| (r, guard.history.len(), guard.id.clone()))
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let (r, history_len, id) = out.map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}")))?;
    Ok(Json(TurnView {
        v: VERSION,
        id,
        reply: r.reply,
        history_len,
        candidates: if req.debug { r.candidates } else { None },
        trace: r.trace,
    }))
}

async fn no_console() -> (StatusCode, &'static str) {
    (StatusCode::NOT_FOUND, "no console directory configured; start with --static <dir>")
}

pub fn router(app: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/v1/modes", get(modes))
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{id}", get(fetch).delete(close))
        .route("/v1/sessions/{id}/turns", post(turn))
        .with_state(app);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api.fallback(no_console),
    }
}

pub async fn serve(app: Arc<AppState>, static_dir: Option<PathBuf>, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(app, static_dir)).await?;
    Ok(())
}
