//! HTTP session API with a server-sent event stream.
//!
//! Routes:
//!
//! | method | path | body / query | reply |
//! |---|---|---|---|
//! | POST | `/sessions` | `{"scenario_name": "default"}` or `{"scenario": {...}}`, optional `"seed"` | 201 `{session_id, created_at, scenario, seed, events}` |
//! | GET | `/sessions/{id}` | | the session handle |
//! | POST | `/sessions/{id}/utterances` | `{"text": "..."}` | `{accepted, events}` |
//! | POST | `/sessions/{id}/answers` | `{"text": "yes"}` | `{accepted, events}`, 409 unless a question is pending |
//! | GET | `/sessions/{id}/state` | | `{mode, estimated_pose, pose_covariance_3x3, metrics}` |
//! | GET | `/sessions/{id}/map` | | recovered grid rows, cell size, goal |
//! | GET | `/sessions/{id}/events` | `?after=N` or `Last-Event-ID` | SSE, one wire event per message |
//!
//! Errors are `{"error": "..."}` with 400, 404, 409, 422 or 500.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::future::Future;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::{watch, Mutex, OwnedMutexGuard, RwLock};

use echomaze_core::event::{canonicalize, EventBody, SessionEvent};
use echomaze_core::scenario::{Scenario, ScenarioFile};
use echomaze_core::session::{Mode, Session, SessionError};
use echomaze_core::world::Occupancy;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("no session with id {0:?}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::InitFailure(_) => ApiError::Unprocessable(e.to_string()),
            SessionError::SessionOver | SessionError::NoPendingQuery | SessionError::NothingToExecute => {
                ApiError::Conflict(e.to_string())
            }
            SessionError::Scenario(_) => ApiError::BadRequest(e.to_string()),
            SessionError::Simulation(_) => ApiError::Internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub session_id: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub scenario: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// When set, each session appends its wire log to `<dir>/<session_id>.jsonl`.
    pub log_dir: Option<PathBuf>,
}

struct LogFile {
    out: BufWriter<File>,
    written: u64,
}

struct Entry {
    handle: SessionHandle,
    session: Arc<Mutex<Session>>,
    latest: watch::Sender<u64>,
    log: std::sync::Mutex<Option<LogFile>>,
}

impl Entry {
    /// Appends new events to the log file and wakes stream subscribers.
    fn publish(&self, session: &Session) -> Result<(), ApiError> {
        let last = session.log().last().map_or(0, |e| e.seq);
        let mut log = self.log.lock().map_err(|_| ApiError::Internal("log lock poisoned".into()))?;
        if let Some(file) = log.as_mut() {
            for e in session.events_after(file.written) {
                writeln!(file.out, "{}", e.to_line()).map_err(|e| ApiError::Internal(e.to_string()))?;
            }
            file.out.flush().map_err(|e| ApiError::Internal(e.to_string()))?;
            file.written = last;
        }
        self.latest.send_replace(last);
        Ok(())
    }
}

#[derive(Clone)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Arc<Entry>>>>,
    config: Arc<ServiceConfig>,
    /// Flips to true on shutdown so open event streams end.
    closing: Arc<watch::Sender<bool>>,
}

impl Default for AppState {
    fn default() -> Self {
        Self::new(ServiceConfig::default())
    }
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            sessions: Arc::default(),
            config: Arc::new(config),
            closing: Arc::new(watch::channel(false).0),
        }
    }

    async fn entry(&self, id: &str) -> Result<Arc<Entry>, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(id.to_string()))
    }

    pub async fn session_count(&self) -> usize {
        self.sessions.read().await.len()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_handle))
        .route("/sessions/{id}/utterances", post(post_utterance))
        .route("/sessions/{id}/answers", post(post_answer))
        .route("/sessions/{id}/state", get(get_state))
        .route("/sessions/{id}/map", get(get_map))
        .route("/sessions/{id}/events", get(get_events))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then lets in-flight requests finish.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let closing = state.closing.clone();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async move {
            shutdown.await;
            closing.send_replace(true);
        })
        .await
}

fn parse_body(body: &[u8]) -> Result<Value, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed JSON body: {e}")))
}

fn wire(events: &[SessionEvent]) -> Vec<Value> {
    events.iter().map(SessionEvent::to_wire).collect()
}

fn scenario_from_request(req: &Value) -> Result<Scenario, ApiError> {
    let bad = |m: String| ApiError::BadRequest(m);
    match (req.get("scenario_name"), req.get("scenario")) {
        (Some(name), None) => {
            let name = name.as_str().ok_or_else(|| bad("scenario_name must be a string".into()))?;
            Scenario::bundled(name).map_err(|e| bad(e.to_string()))
        }
        (None, Some(inline)) => {
            let file: ScenarioFile =
                serde_json::from_value(inline.clone()).map_err(|e| bad(format!("malformed scenario: {e}")))?;
            Scenario::from_file(file).map_err(|e| bad(e.to_string()))
        }
        _ => Err(bad("give exactly one of scenario_name or scenario".into())),
    }
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req = parse_body(&body)?;
    let seed = match req.get("seed") {
        None | Some(Value::Null) => 0,
        Some(v) => v
            .as_u64()
            .ok_or_else(|| ApiError::BadRequest("seed must be a non-negative integer".into()))?,
    };
    let scenario = scenario_from_request(&req)?;
    let name = scenario.name.clone();
    let session = tokio::task::spawn_blocking(move || Session::create(scenario, seed))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;

    let session_id = uuid::Uuid::new_v4().simple().to_string();
    let log = match &state.config.log_dir {
        Some(dir) => {
            let path = dir.join(format!("{session_id}.jsonl"));
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))?;
            Some(LogFile {
                out: BufWriter::new(file),
                written: 0,
            })
        }
        None => None,
    };
    let handle = SessionHandle {
        session_id: session_id.clone(),
        created_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        scenario: name,
        seed,
    };
    let events = wire(session.log());
    let (latest, _) = watch::channel(0);
    let entry = Arc::new(Entry {
        handle: handle.clone(),
        session: Arc::new(Mutex::new(session)),
        latest,
        log: std::sync::Mutex::new(log),
    });
    entry.publish(&*entry.session.lock().await)?;
    state.sessions.write().await.insert(session_id, entry);

    let mut out = serde_json::to_value(&handle).map_err(|e| ApiError::Internal(e.to_string()))?;
    out["events"] = Value::Array(events);
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn get_handle(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionHandle>, ApiError> {
    Ok(Json(state.entry(&id).await?.handle.clone()))
}

fn utterance_text(body: &[u8]) -> Result<String, ApiError> {
    let req = parse_body(body)?;
    req.get("text")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ApiError::BadRequest("body must be {\"text\": string}".into()))
}

/// Runs `op` on the locked session off the async threads, then publishes.
async fn with_session<T, F>(entry: Arc<Entry>, op: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut Session) -> Result<T, ApiError> + Send + 'static,
{
    let guard: OwnedMutexGuard<Session> = entry.session.clone().lock_owned().await;
    tokio::task::spawn_blocking(move || {
        let mut guard = guard;
        let out = op(&mut guard);
        entry.publish(&guard)?;
        out
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
}

fn submit(session: &mut Session, text: &str) -> Result<Value, ApiError> {
    let events = session.submit_utterance(text)?;
    let accepted = !events
        .iter()
        .any(|e| matches!(&e.body, EventBody::Rejected(r) if r.utterance == text));
    Ok(json!({ "accepted": accepted, "events": wire(&events) }))
}

async fn post_utterance(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let entry = state.entry(&id).await?;
    let text = utterance_text(&body)?;
    with_session(entry, move |s| submit(s, &text)).await.map(Json)
}

async fn post_answer(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let entry = state.entry(&id).await?;
    let text = utterance_text(&body)?;
    with_session(entry, move |s| {
        match s.mode() {
            Mode::Completed => return Err(SessionError::SessionOver.into()),
            Mode::AwaitingGuidance => {}
            _ => return Err(SessionError::NoPendingQuery.into()),
        }
        submit(s, &text)
    })
    .await
    .map(Json)
}

async fn get_state(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let entry = state.entry(&id).await?;
    let s = entry.session.lock().await;
    let (pose, cov) = s.estimate();
    let cov: Vec<Vec<f64>> = (0..3).map(|r| (0..3).map(|c| cov[(r, c)]).collect()).collect();
    let mut out = json!({
        "mode": s.mode(),
        "estimated_pose": pose,
        "pose_covariance_3x3": cov,
        "metrics": s.metrics(),
    });
    if s.scenario().config.debug_truth {
        out["true_pose"] = json!(s.true_pose());
    }
    Ok(Json(canonicalize(out)))
}

async fn get_map(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let entry = state.entry(&id).await?;
    let s = entry.session.lock().await;
    let map = s.recovered_map();
    Ok(Json(canonicalize(json!({
        "width_cells": map.grid.width_cells(),
        "height_cells": map.grid.height_cells(),
        "cell_size": map.grid.cell_size(),
        "grid": map.grid.to_rows(),
        "goal": s.scenario().maze.goal(),
        "threshold": map.threshold,
    }))))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    after: Option<u64>,
}

/// Events with seq > `after`, in order, until the session completes or the server stops.
fn event_stream(
    entry: Arc<Entry>,
    closing: watch::Receiver<bool>,
    after: u64,
) -> impl Stream<Item = SessionEvent> + Send {
    let rx = entry.latest.subscribe();
    stream::unfold((entry, rx, closing, after), |(entry, mut rx, mut closing, last)| async move {
        loop {
            rx.mark_unchanged();
            let (batch, over) = {
                let s = entry.session.lock().await;
                (s.events_after(last).to_vec(), s.mode() == Mode::Completed)
            };
            if let Some(tail) = batch.last() {
                let next = tail.seq;
                return Some((stream::iter(batch), (entry, rx, closing, next)));
            }
            if over || *closing.borrow_and_update() {
                return None;
            }
            tokio::select! {
                changed = rx.changed() => if changed.is_err() { return None },
                _ = closing.changed() => return None,
            }
        }
    })
    .flatten()
}

async fn get_events(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, std::convert::Infallible>>>, ApiError> {
    let entry = state.entry(&id).await?;
    let after = match q.after {
        Some(a) => a,
        None => headers
            .get("last-event-id")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(0),
    };
    let events = event_stream(entry, state.closing.subscribe(), after).map(|e| {
        Ok(Event::default()
            .id(e.seq.to_string())
            .event(e.body.kind())
            .data(e.to_line()))
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}
