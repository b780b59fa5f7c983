//! HTTP/JSON service over the durable session store.
//!
//! Every mutation is written to the session's event log before the response
//! is sent. Requests for one session are serialized by a per-session lock;
//! dialogue work (which may call a blocking language model) runs on the
//! blocking thread pool.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use irda_core::dialogue::{finalize, Clock, Dialogue, DialogueSession, SessionConfig, SystemTurn};
use irda_core::env::{render_frames, Frame, TrajectoryPool};
use irda_core::reward::ContextExport;
use irda_core::store::{SessionService, SessionStore, StoredSession};
use irda_core::{DialogueError, LanguageModel, StoreError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    BadState,
    BadRequest,
    UpstreamLlm,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::BadState => StatusCode::CONFLICT,
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::UpstreamLlm => StatusCode::BAD_GATEWAY,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    pub retryable: bool,
}

#[derive(Serialize, Deserialize)]
struct ErrorBody {
    error: ApiError,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into(), retryable: false }
    }
}

impl From<DialogueError> for ApiError {
    fn from(e: DialogueError) -> Self {
        let message = e.to_string();
        match e {
            DialogueError::UnexpectedState(_) | DialogueError::StageIncomplete(_) => ApiError::new(ErrorCode::BadState, message),
            DialogueError::UnparsableLabel | DialogueError::ConfigInvalid(_) | DialogueError::TooFewTrajectories { .. } => {
                ApiError::new(ErrorCode::BadRequest, message)
            }
            DialogueError::Llm(l) => ApiError { code: ErrorCode::UpstreamLlm, retryable: l.is_retryable(), message },
            DialogueError::HypothesisUnparsable => ApiError { code: ErrorCode::UpstreamLlm, retryable: true, message },
            DialogueError::Reward(_) | DialogueError::Sampling(_) | DialogueError::Encoding(_) => {
                ApiError::new(ErrorCode::Internal, message)
            }
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let message = e.to_string();
        match e {
            StoreError::NotFound(_) => ApiError::new(ErrorCode::NotFound, message),
            StoreError::AlreadyExists(_) => ApiError::new(ErrorCode::BadState, message),
            StoreError::InvalidId(_) | StoreError::SequenceGap { .. } => ApiError::new(ErrorCode::BadRequest, message),
            StoreError::Dialogue(d) => d.into(),
            StoreError::Corrupt { .. } | StoreError::Io(_) => ApiError::new(ErrorCode::Internal, message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.code == ErrorCode::Internal {
            tracing::error!(message = %self.message, "request failed");
        }
        (self.code.status(), Json(ErrorBody { error: self })).into_response()
    }
}

pub struct AppState {
    pub pool: TrajectoryPool,
    pub llm: Arc<dyn LanguageModel>,
    pub store: SessionStore,
    pub clock: Arc<dyn Clock>,
    /// Defaults for new sessions; request fields override them.
    pub config: SessionConfig,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl AppState {
    pub fn new(pool: TrajectoryPool, llm: Arc<dyn LanguageModel>, store: SessionStore, clock: Arc<dyn Clock>, config: SessionConfig) -> Self {
        Self { pool, llm, store, clock, config, locks: Mutex::new(HashMap::new()) }
    }

    fn lock_for(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|p| p.into_inner());
        locks.entry(id.to_string()).or_default().clone()
    }

    /// Runs `f` with the session service while holding the session's lock.
    fn with_service<T>(&self, id: &str, f: impl FnOnce(&SessionService<'_>) -> Result<T, StoreError>) -> Result<T, ApiError> {
        let lock = self.lock_for(id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let service = SessionService::new(Dialogue::new(&self.pool, self.llm.as_ref(), self.clock.as_ref()), &self.store);
        f(&service).map_err(ApiError::from)
    }

    /// Answers messages left pending by a crash, for every stored session.
    pub fn recover_all(&self) -> Result<usize, StoreError> {
        let ids = self.store.ids()?;
        for id in &ids {
            let service = SessionService::new(Dialogue::new(&self.pool, self.llm.as_ref(), self.clock.as_ref()), &self.store);
            if let Err(e) = service.recover(id) {
                tracing::warn!(session = %id, error = %e, "session could not be recovered");
            }
        }
        Ok(ids.len())
    }
}

type Shared = Arc<AppState>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(ErrorCode::Internal, format!("worker failed: {e}")))?
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub session_id: Option<String>,
    pub config: Option<ConfigOverrides>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub k: Option<usize>,
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub max_clarify_passes: Option<usize>,
    pub max_uncertainty_rounds: Option<Option<usize>>,
}

impl ConfigOverrides {
    fn apply(&self, mut c: SessionConfig) -> SessionConfig {
        c.k = self.k.unwrap_or(c.k);
        c.epsilon = self.epsilon.unwrap_or(c.epsilon);
        c.seed = self.seed.unwrap_or(c.seed);
        c.max_clarify_passes = self.max_clarify_passes.unwrap_or(c.max_clarify_passes);
        c.max_uncertainty_rounds = self.max_uncertainty_rounds.unwrap_or(c.max_uncertainty_rounds);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResponse {
    pub session_id: String,
    pub state: String,
    pub msg_seq: u64,
    pub turn: SystemTurn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub state: String,
    pub msg_seq: u64,
    pub turn: SystemTurn,
    pub session: DialogueSession,
}

impl From<StoredSession> for SessionView {
    fn from(s: StoredSession) -> Self {
        Self {
            session_id: s.session.session_id.clone(),
            state: s.session.state.name().to_string(),
            msg_seq: s.msg_seq,
            turn: s.turn,
            session: s.session,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageRequest {
    pub seq: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramesResponse {
    pub trajectory_id: String,
    pub frames: Vec<Frame>,
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/trajectories/{tid}/frames", get(get_frames))
        .route("/sessions/{id}/context", get(get_context))
        .with_state(state)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

fn json_body<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return serde_json::from_str("{}").map_err(|e| ApiError::new(ErrorCode::BadRequest, e.to_string()));
    }
    serde_json::from_slice(bytes).map_err(|e| ApiError::new(ErrorCode::BadRequest, format!("invalid JSON body: {e}")))
}

async fn create_session(State(state): State<Shared>, body: axum::body::Bytes) -> Result<(StatusCode, Json<TurnResponse>), ApiError> {
    let req: CreateRequest = json_body(&body)?;
    let id = req.session_id.clone().unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
    let config = req.config.unwrap_or_default().apply(state.config.clone());
    let response = blocking(move || {
        state.with_service(&id, |svc| {
            let (session, turn) = svc.create(&id, config)?;
            Ok(TurnResponse { session_id: id.clone(), state: session.state.name().into(), msg_seq: 0, turn })
        })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(response)))
}

async fn list_sessions(State(state): State<Shared>) -> Result<Json<Vec<String>>, ApiError> {
    Ok(Json(state.store.ids().map_err(ApiError::from)?))
}

async fn get_session(State(state): State<Shared>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    blocking(move || state.with_service(&id, |svc| svc.recover(&id)).map(|s| Json(s.into()))).await
}

async fn post_message(State(state): State<Shared>, Path(id): Path<String>, body: axum::body::Bytes) -> Result<Json<TurnResponse>, ApiError> {
    let req: MessageRequest = json_body(&body)?;
    blocking(move || {
        state.with_service(&id, |svc| {
            let turn = svc.submit(&id, req.seq, &req.text)?;
            let stored = svc.store.load(&id)?;
            Ok(Json(TurnResponse { session_id: id.clone(), state: stored.session.state.name().into(), msg_seq: req.seq, turn }))
        })
    })
    .await
}

async fn get_frames(State(state): State<Shared>, Path((id, tid)): Path<(String, String)>) -> Result<Json<FramesResponse>, ApiError> {
    if !state.store.exists(&id) {
        return Err(ApiError::new(ErrorCode::NotFound, format!("session `{id}` not found")));
    }
    let traj = state
        .pool
        .get(&tid)
        .ok_or_else(|| ApiError::new(ErrorCode::NotFound, format!("trajectory `{tid}` not found")))?;
    Ok(Json(FramesResponse { trajectory_id: tid.clone(), frames: render_frames(traj) }))
}

async fn get_context(State(state): State<Shared>, Path(id): Path<String>) -> Result<Json<ContextExport>, ApiError> {
    blocking(move || {
        let stored = state.with_service(&id, |svc| svc.recover(&id))?;
        let ctx = finalize(&stored.session)?;
        let export = ContextExport::new(&ctx).map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?;
        Ok(Json(export))
    })
    .await
}
