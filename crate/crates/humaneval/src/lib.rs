//! HTTP service for the two-annotator review of non-exact predictions.
//!
//! Each session lives in one append-only event file under
//! `<data-dir>/sessions/<id>.jsonl`, replayed at startup. Mutations to a
//! session go through its own mutex, so they apply in arrival order; an event
//! is on disk before it touches the in-memory state.
//!
//! While a session is open no response carries another annotator's verdict,
//! nor anything derived from it (agreement, disputes, verdict export).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{SecondsFormat, Utc};
use medvqa_core::eval::{build_human_session, parse_jsonl, to_jsonl, Judgement, Prediction, SynonymTable};
use medvqa_core::humaneval::{
    source_hash, AgreementStats, EvalSession, Event, EventLog, ItemView, LogError, SessionError, SessionItem,
    SessionReport, SessionStatus,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{Mutex, RwLock};
use tower_http::services::ServeDir;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Log {
        path: String,
        #[source]
        source: LogError,
    },
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Served read-only under `/images`; defaults to `<data-dir>/images`.
    pub images_dir: Option<PathBuf>,
    /// Show the rule engine's suggestion to annotators. Off by default so
    /// reviewers judge the raw pair.
    pub hints: bool,
    pub synonyms: SynonymTable,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            images_dir: None,
            hints: false,
            synonyms: SynonymTable::default(),
        }
    }

    fn sessions_dir(&self) -> PathBuf {
        self.data_dir.join("sessions")
    }

    fn images_dir(&self) -> PathBuf {
        self.images_dir.clone().unwrap_or_else(|| self.data_dir.join("images"))
    }
}

struct Entry {
    log: EventLog,
    session: EvalSession,
}

pub struct AppState {
    config: ServiceConfig,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Entry>>>>,
}

impl AppState {
    /// Creates the data directory if needed and replays every session log in it.
    pub fn open(config: ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        let dir = config.sessions_dir();
        let io = |source| ServiceError::Io {
            path: dir.display().to_string(),
            source,
        };
        std::fs::create_dir_all(&dir).map_err(io)?;
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        let mut sessions = BTreeMap::new();
        for path in paths {
            let (log, session) = EventLog::open(&path).map_err(|source| ServiceError::Log {
                path: path.display().to_string(),
                source,
            })?;
            log::info!("replayed session {} ({:?})", session.session_id, session.status);
            sessions.insert(session.session_id.clone(), Arc::new(Mutex::new(Entry { log, session })));
        }
        Ok(Arc::new(Self {
            config,
            sessions: RwLock::new(sessions),
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Current in-memory state of a session.
    pub async fn snapshot(&self, id: &str) -> Option<EvalSession> {
        let entry = self.sessions.read().await.get(id).cloned()?;
        let guard = entry.lock().await;
        Some(guard.session.clone())
    }

    pub fn log_path(&self, id: &str) -> PathBuf {
        self.config.sessions_dir().join(format!("{id}.jsonl"))
    }

    async fn entry(&self, id: &str) -> Result<Arc<Mutex<Entry>>, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session `{id}`")))
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::UnknownItem(_) => StatusCode::NOT_FOUND,
            SessionError::UnknownAnnotator(_) => StatusCode::FORBIDDEN,
            SessionError::Annotators(_) | SessionError::Eval(_) => StatusCode::BAD_REQUEST,
            SessionError::WrongState(_)
            | SessionError::AlreadyJudged { .. }
            | SessionError::NotDisputed(_)
            | SessionError::AlreadyReconciled(_)
            | SessionError::Unfinalized(_) => StatusCode::CONFLICT,
            SessionError::Sequence { .. } | SessionError::NotCreated | SessionError::AlreadyCreated => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        let mut err = ApiError::new(status, e.to_string());
        if let SessionError::Unfinalized(ids) = &e {
            err.body["unfinalized"] = json!(ids);
        }
        err
    }
}

impl From<LogError> for ApiError {
    fn from(e: LogError) -> Self {
        log::error!("event log write failed: {e}");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn require_closed(s: &EvalSession) -> ApiResult<()> {
    if s.status == SessionStatus::Open {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "not available while annotators are still judging",
        ));
    }
    Ok(())
}

/// Checks `event`, makes it durable, then applies it.
fn commit(entry: &mut Entry, event: Event) -> ApiResult<()> {
    entry.session.check(&event)?;
    entry.log.append(&event)?;
    entry.session.apply(&event)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// Contents of a predictions JSONL file; its hash identifies the session.
    pub predictions: String,
    pub annotators: [String; 2],
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub status: SessionStatus,
    pub annotators: [String; 2],
    pub n_items: usize,
    pub n_exact: usize,
    /// Items judged by each annotator so far.
    pub progress: BTreeMap<String, usize>,
    /// Disputed item ids awaiting adjudication; hidden while open.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disputes: Option<Vec<String>>,
}

fn summary(s: &EvalSession) -> SessionSummary {
    let progress = s
        .annotators
        .iter()
        .map(|a| (a.clone(), s.items.iter().filter(|i| i.verdicts.contains_key(a)).count()))
        .collect();
    SessionSummary {
        session_id: s.session_id.clone(),
        status: s.status,
        annotators: s.annotators.clone(),
        n_items: s.items.len(),
        n_exact: s.exact.len(),
        progress,
        disputes: (s.status != SessionStatus::Open)
            .then(|| s.disputes().iter().map(|i| i.item_id.clone()).collect()),
    }
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionSummary>)> {
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, m);
    let preds: Vec<Prediction> = parse_jsonl(&req.predictions).map_err(|e| bad(e.to_string()))?;
    let spec = build_human_session(&preds, &state.config.synonyms).map_err(|e| bad(e.to_string()))?;
    let hash = source_hash(req.predictions.as_bytes());
    let created = EvalSession::create_event(&hash, req.annotators, spec, now())?;
    let session = EvalSession::from_created(&created)?;
    let id = session.session_id.clone();

    let mut sessions = state.sessions.write().await;
    if sessions.contains_key(&id) {
        let mut err = ApiError::new(StatusCode::CONFLICT, format!("session `{id}` already exists for this file"));
        err.body["session_id"] = json!(id);
        return Err(err);
    }
    let log = EventLog::create(&state.log_path(&id), &created)?;
    let out = summary(&session);
    log::info!("created session {id} with {} review items", session.items.len());
    sessions.insert(id, Arc::new(Mutex::new(Entry { log, session })));
    Ok((StatusCode::CREATED, Json(out)))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<SessionSummary>> {
    let entries: Vec<_> = state.sessions.read().await.values().cloned().collect();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        out.push(summary(&e.lock().await.session));
    }
    Json(out)
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionSummary>> {
    let entry = state.entry(&id).await?;
    let guard = entry.lock().await;
    Ok(Json(summary(&guard.session)))
}

#[derive(Debug, Deserialize)]
pub struct AnnotatorQuery {
    pub annotator: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextItem {
    pub status: SessionStatus,
    pub remaining: usize,
    pub item: Option<ItemView>,
}

async fn next_item(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<AnnotatorQuery>,
) -> ApiResult<Json<NextItem>> {
    let entry = state.entry(&id).await?;
    let guard = entry.lock().await;
    let s = &guard.session;
    let item = s.next_for(&q.annotator, state.config.hints)?;
    let remaining = s.items.iter().filter(|i| !i.verdicts.contains_key(&q.annotator)).count();
    Ok(Json(NextItem {
        status: s.status,
        remaining,
        item,
    }))
}

async fn list_items(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<AnnotatorQuery>,
) -> ApiResult<Json<Vec<ItemView>>> {
    let entry = state.entry(&id).await?;
    let guard = entry.lock().await;
    Ok(Json(guard.session.views_for(&q.annotator, state.config.hints)?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRequest {
    pub annotator: String,
    pub verdict: Judgement,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerdictAck {
    pub item_id: String,
    pub verdict: Judgement,
    pub status: SessionStatus,
}

async fn submit_verdict(
    State(state): State<Arc<AppState>>,
    UrlPath((id, item_id)): UrlPath<(String, String)>,
    Json(req): Json<VerdictRequest>,
) -> ApiResult<Json<VerdictAck>> {
    let entry = state.entry(&id).await?;
    let mut guard = entry.lock().await;
    let event = guard.session.verdict_event(&item_id, &req.annotator, req.verdict, now())?;
    commit(&mut guard, event)?;
    Ok(Json(VerdictAck {
        item_id,
        verdict: req.verdict,
        status: guard.session.status,
    }))
}

async fn list_disputes(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Vec<SessionItem>>> {
    let entry = state.entry(&id).await?;
    let guard = entry.lock().await;
    require_closed(&guard.session)?;
    Ok(Json(guard.session.disputes().into_iter().cloned().collect()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconcileRequest {
    pub adjudicator: String,
    pub verdict: Judgement,
}

async fn reconcile(
    State(state): State<Arc<AppState>>,
    UrlPath((id, item_id)): UrlPath<(String, String)>,
    Json(req): Json<ReconcileRequest>,
) -> ApiResult<Json<SessionItem>> {
    if req.adjudicator.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "adjudicator id is empty"));
    }
    let entry = state.entry(&id).await?;
    let mut guard = entry.lock().await;
    let event = guard.session.reconcile_event(&item_id, &req.adjudicator, req.verdict, now())?;
    commit(&mut guard, event)?;
    let item = guard.session.items.iter().find(|i| i.item_id == item_id).cloned();
    Ok(Json(item.expect("reconciled item exists")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalizeRequest {
    pub actor: String,
}

async fn finalize(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<FinalizeRequest>,
) -> ApiResult<Json<SessionReport>> {
    let entry = state.entry(&id).await?;
    let mut guard = entry.lock().await;
    let event = guard.session.finalize_event(&req.actor, now())?;
    commit(&mut guard, event)?;
    Ok(Json(guard.session.report()?))
}

async fn report(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionReport>> {
    let entry = state.entry(&id).await?;
    let guard = entry.lock().await;
    Ok(Json(guard.session.report()?))
}

async fn agreement(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<AgreementStats>> {
    let entry = state.entry(&id).await?;
    let guard = entry.lock().await;
    require_closed(&guard.session)?;
    Ok(Json(guard.session.agreement()))
}

/// The verdict file, in the format `medvqa eval score --verdicts` reads.
async fn verdicts(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let entry = state.entry(&id).await?;
    let guard = entry.lock().await;
    require_closed(&guard.session)?;
    let body = to_jsonl(&guard.session.verdict_records());
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

#[derive(Debug, Serialize)]
struct Health {
    sessions: usize,
    hints: bool,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        sessions: state.sessions.read().await.len(),
        hints: state.config.hints,
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    let images = ServeDir::new(state.config.images_dir());
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/items", get(list_items))
        .route("/sessions/{id}/items/{iid}/verdict", post(submit_verdict))
        .route("/sessions/{id}/items/{iid}/reconcile", post(reconcile))
        .route("/sessions/{id}/disputes", get(list_disputes))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/sessions/{id}/report", get(report))
        .route("/sessions/{id}/agreement", get(agreement))
        .route("/sessions/{id}/verdicts", get(verdicts))
        .nest_service("/images", images)
        .with_state(state)
}

/// Serves until the listener fails or the task is dropped.
pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
