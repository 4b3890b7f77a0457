//! `/v1` HTTP service for live sessions.
//!
//! Two audiences read these payloads. Session creation and
//! `GET /v1/sessions/{id}?view=user` serve the person who knows the target.
//! Every other response is agent-facing and never carries the target.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mug_core::agent::{Model, Variant};
use mug_core::eval::{episode_seed, Agent, EvalError, ModelAgent, Observation};
use mug_core::io::append_session;
use mug_core::live::{LiveError, LiveSession, LiveState};
use mug_core::screen::{Screen, MAX_TURNS};
use mug_core::vocab::Vocab;
use serde::{Deserialize, Serialize};
use serde_json::json;

/// File under the data directory that receives terminal transcripts.
pub const TRANSCRIPTS_FILE: &str = "live_sessions.jsonl";

/// A checkpointed model that owns its parameters.
pub struct OwnedModelAgent {
    pub model: Model,
    pub variant: Variant,
    pub vocab: Vocab,
}

impl Agent for OwnedModelAgent {
    fn id(&self) -> String {
        format!("model-{}", self.variant)
    }

    fn variant(&self) -> Option<Variant> {
        Some(self.variant)
    }

    fn logits(&self, obs: &Observation<'_>) -> Result<Vec<f64>, EvalError> {
        ModelAgent::new(&self.model, self.variant, &self.vocab).logits(obs)
    }
}

pub struct AppState {
    pub agent: Arc<dyn Agent + Send + Sync>,
    pub screens: BTreeMap<String, Screen>,
    /// Transcripts are appended here when set.
    pub data_dir: Option<PathBuf>,
    pub seed: u64,
    sessions: Mutex<HashMap<String, Arc<Mutex<LiveSession>>>>,
    counter: AtomicU64,
    prefix: String,
    file_lock: Mutex<()>,
}

impl AppState {
    pub fn new(
        agent: Arc<dyn Agent + Send + Sync>,
        screens: BTreeMap<String, Screen>,
        data_dir: Option<PathBuf>,
        seed: u64,
    ) -> Self {
        let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
        Self {
            agent,
            screens,
            data_dir,
            seed,
            sessions: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(0),
            prefix: format!("live-{:x}", nanos as u64),
            file_lock: Mutex::new(()),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<LiveSession>>, ApiError> {
        self.sessions
            .lock()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }

    fn persist(&self, live: &LiveSession) -> Result<(), ApiError> {
        let Some(dir) = &self.data_dir else { return Ok(()) };
        let _guard = self.file_lock.lock().expect("transcript file lock");
        append_session(&dir.join(TRANSCRIPTS_FILE), &live.to_session())
            .map_err(|e| ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: e.to_string(), rule: None })
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    rule: Option<&'static str>,
}

impl ApiError {
    fn not_found(message: String) -> Self {
        Self { status: StatusCode::NOT_FOUND, message, rule: None }
    }
}

impl From<LiveError> for ApiError {
    fn from(e: LiveError) -> Self {
        let (status, rule) = match &e {
            LiveError::WrongState { .. } => (StatusCode::CONFLICT, Some("state_machine")),
            LiveError::RepeatedCommand(_) => (StatusCode::CONFLICT, Some("no_repeated_command")),
            LiveError::ConfirmMismatch { .. } => (StatusCode::CONFLICT, Some("confirmation_matches_target")),
            LiveError::EmptyCommand | LiveError::CommandTooLong(_) => (StatusCode::UNPROCESSABLE_ENTITY, Some("command_length")),
            LiveError::TargetNotClickable(_) => (StatusCode::UNPROCESSABLE_ENTITY, Some("target_clickable")),
            LiveError::Agent(_) => (StatusCode::INTERNAL_SERVER_ERROR, None),
        };
        Self { status, message: e.to_string(), rule }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(r) = self.rule {
            body["rule"] = json!(r);
        }
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub screen_id: Option<String>,
    pub target: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct CreateResponse {
    pub session_id: String,
    pub state: LiveState,
    pub max_turns: usize,
    pub screen: Screen,
    pub target: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandRequest {
    pub text: String,
}

#[derive(Debug, Serialize)]
pub struct Selection {
    pub index: usize,
    pub bbox: [f64; 4],
}

#[derive(Debug, Serialize)]
pub struct CommandResponse {
    pub session_id: String,
    pub turn: usize,
    pub selection: Option<Selection>,
    pub state: LiveState,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfirmRequest {
    pub correct: bool,
}

#[derive(Debug, Serialize)]
pub struct ConfirmResponse {
    pub session_id: String,
    pub state: LiveState,
    pub turns: usize,
}

#[derive(Debug, Serialize)]
pub struct TurnView {
    pub command: String,
    pub action: usize,
}

#[derive(Debug, Serialize)]
pub struct SessionView {
    pub session_id: String,
    pub screen_id: String,
    pub state: LiveState,
    pub max_turns: usize,
    pub turns: Vec<TurnView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
pub struct ViewQuery {
    pub view: Option<String>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/command", post(post_command))
        .route("/v1/sessions/{id}/confirm", post(confirm))
        .route("/v1/screens/{id}", get(get_screen))
        .with_state(state)
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    body: Option<Json<CreateRequest>>,
) -> Result<(StatusCode, Json<CreateResponse>), ApiError> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let n = st.counter.fetch_add(1, Ordering::Relaxed);
    let screen = match &req.screen_id {
        Some(id) => st.screens.get(id).ok_or_else(|| ApiError::not_found(format!("unknown screen {id}")))?,
        None => {
            if st.screens.is_empty() {
                return Err(ApiError::not_found("the service has no screens".into()));
            }
            let k = episode_seed(st.seed, "screen", n as usize) as usize % st.screens.len();
            st.screens.values().nth(k).expect("index in range")
        }
    };
    let target = match req.target {
        Some(t) => t,
        None => {
            let clickable = screen.clickable_indices();
            clickable[episode_seed(st.seed, "target", n as usize) as usize % clickable.len()]
        }
    };
    let session_id = format!("{}-{n:06}", st.prefix);
    let live = LiveSession::new(session_id.clone(), screen.clone(), target)?;
    let resp = CreateResponse { session_id: session_id.clone(), state: live.state, max_turns: MAX_TURNS, screen: screen.clone(), target };
    st.sessions.lock().expect("session table lock").insert(session_id, Arc::new(Mutex::new(live)));
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn get_session(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ViewQuery>,
) -> Result<Json<SessionView>, ApiError> {
    let handle = st.session(&id)?;
    let live = handle.lock().expect("session lock");
    let user_view = match q.view.as_deref() {
        None | Some("agent") => false,
        Some("user") => true,
        Some(other) => {
            return Err(ApiError { status: StatusCode::BAD_REQUEST, message: format!("unknown view {other:?}"), rule: None })
        }
    };
    Ok(Json(SessionView {
        session_id: live.session_id.clone(),
        screen_id: live.screen.screen_id.clone(),
        state: live.state,
        max_turns: MAX_TURNS,
        turns: live.turns.iter().map(|t| TurnView { command: t.command.text(), action: t.action }).collect(),
        target: user_view.then_some(live.target),
    }))
}

async fn post_command(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<CommandRequest>,
) -> Result<Json<CommandResponse>, ApiError> {
    let handle = st.session(&id)?;
    let mut live = handle.lock().expect("session lock");
    let picked = live.post_command(&req.text, st.agent.as_ref())?;
    if live.state.is_terminal() {
        st.persist(&live)?;
    }
    Ok(Json(CommandResponse {
        session_id: id,
        turn: live.turns.len(),
        selection: picked.map(|i| Selection { index: i, bbox: live.screen.objects[i].bbox.to_array() }),
        state: live.state,
    }))
}

async fn confirm(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<ConfirmRequest>,
) -> Result<Json<ConfirmResponse>, ApiError> {
    let handle = st.session(&id)?;
    let mut live = handle.lock().expect("session lock");
    let state = live.confirm(req.correct)?;
    if state.is_terminal() {
        st.persist(&live)?;
    }
    Ok(Json(ConfirmResponse { session_id: id, state, turns: live.turns.len() }))
}

async fn get_screen(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Screen>, ApiError> {
    st.screens.get(&id).cloned().map(Json).ok_or_else(|| ApiError::not_found(format!("unknown screen {id}")))
}
