//! HTTP service exposing interactive simulation sessions.
//!
//! Each session is owned by one task that integrates ahead of the wall clock
//! at its time ratio and applies commands in arrival order. Sampled frames
//! fan out to stream subscribers through a bounded broadcast channel; a
//! subscriber that falls behind loses the oldest frames and is told how many.
//!
//! | method | path | body / reply |
//! |---|---|---|
//! | POST | `/sessions` | `CreateSession` → `Created` |
//! | GET | `/sessions` | list of `SessionInfo` |
//! | GET | `/sessions/{id}/state` | `StateReply` |
//! | POST | `/sessions/{id}/actions` | action record → `{"frame": ..}` |
//! | POST | `/sessions/{id}/control` | `Control` → `SessionInfo` |
//! | POST | `/sessions/{id}/advance` | `{"seconds": s}` → `StateReply` |
//! | GET | `/sessions/{id}/stream?every=n` | server-sent `frame` / `dropped` events |
//! | GET | `/sessions/{id}/log` | action log, TOML |
//! | GET | `/sessions/{id}/replay` | replay scenario, TOML |
//! | GET | `/sessions/{id}/telemetry.csv` | frames so far |
//! | DELETE | `/sessions/{id}` | persists the run → `{"run_dir": ..}` |

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cryoloop::scenario::{Scenario, ScenarioError};
use cryoloop::session::Session;
use cryoloop::telemetry::TelemetryFrame;
use cryoloop::transient::{Action, ActionRecord};
use cryoloop::units::to_bar;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio_stream::wrappers::errors::BroadcastStreamRecvError;
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::{Stream, StreamExt};

use crate::files::{persist_run, ActionLog};

pub const MIN_TIME_RATIO: f64 = 1.0;
pub const MAX_TIME_RATIO: f64 = 1000.0;
const TICK: Duration = Duration::from_millis(50);
const COMMAND_QUEUE: usize = 64;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub runs_dir: PathBuf,
    /// Scenario used when a create request carries none.
    pub default_scenario: Option<String>,
    /// Frames buffered per subscriber before the oldest are dropped.
    pub stream_capacity: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            runs_dir: PathBuf::from("runs"),
            default_scenario: None,
            stream_capacity: 1024,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("unknown session `{0}`")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("session `{0}` is busy, try again")]
    Busy(String),
    #[error("{0}")]
    Internal(String),
}

impl From<cryoloop::Error> for ApiError {
    fn from(e: cryoloop::Error) -> Self {
        ApiError::BadRequest(e.to_string())
    }
}

impl From<ScenarioError> for ApiError {
    fn from(e: ScenarioError) -> Self {
        ApiError::BadRequest(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Busy(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Paused,
    /// The integrator hit an error; the session keeps its last good state.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub clock_s: f64,
    pub time_ratio: f64,
    pub status: RunStatus,
    pub subscribers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateSession {
    /// Scenario document, TOML.
    pub scenario_toml: Option<String>,
    pub overrides: Vec<String>,
    pub time_ratio: Option<f64>,
    pub paused: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub frame: TelemetryFrame,
    pub info: SessionInfo,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Control {
    pub time_ratio: Option<f64>,
    pub paused: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Advance {
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateReply {
    pub info: SessionInfo,
    pub frame: TelemetryFrame,
    /// Pressure of the loop first, then of each isolated experiment, bar.
    pub pressures_bar: Vec<f64>,
    pub helium_kg: f64,
    pub topped_up_kg: f64,
    pub vented_kg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActReply {
    pub frame: TelemetryFrame,
}

#[derive(Debug, Clone, Deserialize)]
pub struct StreamQuery {
    #[serde(default = "one")]
    pub every: u64,
}

fn one() -> u64 {
    1
}

enum Command {
    Act(Action, oneshot::Sender<Result<TelemetryFrame, String>>),
    Advance(f64, oneshot::Sender<Result<(), String>>),
    Control(Control, oneshot::Sender<Result<(), String>>),
    State(oneshot::Sender<StateReply>),
    Log(oneshot::Sender<ActionLog>),
    Replay(oneshot::Sender<Scenario>),
    Csv(oneshot::Sender<String>),
    Close(oneshot::Sender<Session>),
}

#[derive(Clone)]
struct Handle {
    commands: mpsc::Sender<Command>,
    frames: broadcast::Sender<TelemetryFrame>,
    subscribers: Arc<AtomicUsize>,
}

#[derive(Clone)]
pub struct AppState {
    config: Arc<ServiceConfig>,
    sessions: Arc<RwLock<HashMap<String, Handle>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            config: Arc::new(config),
            sessions: Arc::default(),
        }
    }

    fn handle(&self, id: &str) -> Result<Handle, ApiError> {
        self.sessions
            .read()
            .expect("session registry lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(id.to_string()))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create).get(list))
        .route("/sessions/{id}", axum::routing::delete(close))
        .route("/sessions/{id}/state", get(state_of))
        .route("/sessions/{id}/actions", post(act))
        .route("/sessions/{id}/control", post(control))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/stream", get(stream))
        .route("/sessions/{id}/log", get(log))
        .route("/sessions/{id}/replay", get(replay))
        .route("/sessions/{id}/telemetry.csv", get(csv))
        .with_state(state)
}

fn check_ratio(ratio: f64) -> Result<f64, ApiError> {
    if (MIN_TIME_RATIO..=MAX_TIME_RATIO).contains(&ratio) {
        Ok(ratio)
    } else {
        Err(ApiError::BadRequest(format!(
            "time ratio must lie in [{MIN_TIME_RATIO}, {MAX_TIME_RATIO}], got {ratio}"
        )))
    }
}

/// Session owner: integrates on a timer and serves commands in order.
struct Runner {
    id: String,
    session: Session,
    frames: broadcast::Sender<TelemetryFrame>,
    subscribers: Arc<AtomicUsize>,
    time_ratio: f64,
    paused: bool,
    failure: Option<String>,
    /// Simulated seconds owed to the wall clock.
    owed: f64,
}

impl Runner {
    fn info(&self) -> SessionInfo {
        let status = if self.failure.is_some() {
            RunStatus::Failed
        } else if self.paused {
            RunStatus::Paused
        } else {
            RunStatus::Running
        };
        SessionInfo {
            id: self.id.clone(),
            clock_s: self.session.clock(),
            time_ratio: self.time_ratio,
            status,
            subscribers: self.subscribers.load(Ordering::Relaxed),
            failure: self.failure.clone(),
        }
    }

    fn state(&self) -> StateReply {
        let s = self.session.state();
        let model = self.session.simulation().model();
        StateReply {
            info: self.info(),
            frame: self.session.snapshot(),
            pressures_bar: model.pressures(s).into_iter().map(to_bar).collect(),
            helium_kg: s.total_mass(),
            topped_up_kg: s.topped_up_mass,
            vented_kg: s.vented_mass,
        }
    }

    fn step(&mut self, steps: u64) -> Result<(), String> {
        if let Some(f) = &self.failure {
            return Err(f.clone());
        }
        for _ in 0..steps {
            match self.session.advance() {
                Ok(Some(frame)) => {
                    // No subscribers is not an error.
                    let _ = self.frames.send(frame);
                }
                Ok(None) => {}
                Err(e) => {
                    let msg = e.to_string();
                    log::warn!("session {} stopped: {msg}", self.id);
                    self.failure = Some(msg.clone());
                    return Err(msg);
                }
            }
        }
        Ok(())
    }

    fn tick(&mut self, elapsed: f64) {
        if self.paused || self.failure.is_some() {
            return;
        }
        let dt = self.session.simulation().model().dt();
        self.owed += self.time_ratio * elapsed;
        let steps = (self.owed / dt).floor();
        self.owed -= steps * dt;
        let _ = self.step(steps as u64);
    }

    /// Returns the session when the command closes it.
    fn handle(&mut self, cmd: Command) -> Option<oneshot::Sender<Session>> {
        match cmd {
            Command::Act(action, reply) => {
                let _ = reply.send(self.session.act(action).map_err(|e| e.to_string()));
            }
            Command::Advance(seconds, reply) => {
                let dt = self.session.simulation().model().dt();
                let steps = cryoloop::transient::event_step(seconds, dt);
                let _ = reply.send(self.step(steps));
            }
            Command::Control(c, reply) => {
                if let Some(r) = c.time_ratio {
                    self.time_ratio = r;
                }
                if let Some(p) = c.paused {
                    self.paused = p;
                    self.owed = 0.0;
                }
                let _ = reply.send(Ok(()));
            }
            Command::State(reply) => {
                let _ = reply.send(self.state());
            }
            Command::Log(reply) => {
                let _ = reply.send(ActionLog::of(&self.session));
            }
            Command::Replay(reply) => {
                let _ = reply.send(self.session.replay_scenario());
            }
            Command::Csv(reply) => {
                let _ = reply.send(self.session.csv());
            }
            Command::Close(reply) => return Some(reply),
        }
        None
    }
}

async fn run_session(mut runner: Runner, mut commands: mpsc::Receiver<Command>) {
    let mut timer = tokio::time::interval(TICK);
    timer.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut last = tokio::time::Instant::now();
    loop {
        tokio::select! {
            cmd = commands.recv() => {
                let Some(cmd) = cmd else { return };
                if let Some(reply) = runner.handle(cmd) {
                    let _ = reply.send(runner.session);
                    return;
                }
            }
            now = timer.tick() => {
                let elapsed = now.duration_since(last).as_secs_f64();
                last = now;
                runner.tick(elapsed);
            }
        }
    }
}

async fn request<T>(h: &Handle, id: &str, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> Result<T, ApiError> {
    let (tx, rx) = oneshot::channel();
    h.commands.try_send(make(tx)).map_err(|e| match e {
        mpsc::error::TrySendError::Full(_) => ApiError::Busy(id.to_string()),
        mpsc::error::TrySendError::Closed(_) => ApiError::NotFound(id.to_string()),
    })?;
    rx.await.map_err(|_| ApiError::NotFound(id.to_string()))
}

async fn create(
    State(app): State<AppState>,
    body: Option<Json<CreateSession>>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let text = req
        .scenario_toml
        .or_else(|| app.config.default_scenario.clone())
        .ok_or_else(|| ApiError::BadRequest("no scenario given and no default configured".into()))?;
    let scenario = Scenario::parse_with_overrides(&text, &req.overrides)?;
    let time_ratio = check_ratio(req.time_ratio.unwrap_or(1.0))?;
    let session = Session::new(scenario)?;
    let frame = session.frames()[0].clone();

    let id = uuid::Uuid::new_v4().simple().to_string();
    let (frames, _) = broadcast::channel(app.config.stream_capacity.max(1));
    let (commands, rx) = mpsc::channel(COMMAND_QUEUE);
    let subscribers = Arc::new(AtomicUsize::new(0));
    let runner = Runner {
        id: id.clone(),
        session,
        frames: frames.clone(),
        subscribers: subscribers.clone(),
        time_ratio,
        paused: req.paused,
        failure: None,
        owed: 0.0,
    };
    let info = runner.info();
    tokio::spawn(run_session(runner, rx));
    app.sessions.write().expect("session registry lock").insert(
        id.clone(),
        Handle {
            commands,
            frames,
            subscribers,
        },
    );
    log::info!("session {id} created");
    Ok((StatusCode::CREATED, Json(Created { id, frame, info })))
}

async fn list(State(app): State<AppState>) -> Result<Json<Vec<SessionInfo>>, ApiError> {
    let handles: Vec<(String, Handle)> = app
        .sessions
        .read()
        .expect("session registry lock")
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut out = Vec::new();
    for (id, h) in handles {
        if let Ok(s) = request(&h, &id, Command::State).await {
            out.push(s.info);
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Json(out))
}

async fn state_of(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<StateReply>, ApiError> {
    let h = app.handle(&id)?;
    Ok(Json(request(&h, &id, Command::State).await?))
}

async fn act(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(record): Json<ActionRecord>,
) -> Result<Json<ActReply>, ApiError> {
    let h = app.handle(&id)?;
    let action = Action::try_from(record)?;
    let frame = request(&h, &id, |tx| Command::Act(action, tx))
        .await?
        .map_err(ApiError::BadRequest)?;
    Ok(Json(ActReply { frame }))
}

async fn control(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(c): Json<Control>,
) -> Result<Json<SessionInfo>, ApiError> {
    if let Some(r) = c.time_ratio {
        check_ratio(r)?;
    }
    let h = app.handle(&id)?;
    request(&h, &id, |tx| Command::Control(c, tx))
        .await?
        .map_err(ApiError::BadRequest)?;
    Ok(Json(request(&h, &id, Command::State).await?.info))
}

async fn advance(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(a): Json<Advance>,
) -> Result<Json<StateReply>, ApiError> {
    if !(a.seconds >= 0.0 && a.seconds.is_finite()) {
        return Err(ApiError::BadRequest(format!("cannot advance by {} s", a.seconds)));
    }
    let h = app.handle(&id)?;
    request(&h, &id, |tx| Command::Advance(a.seconds, tx))
        .await?
        .map_err(ApiError::Internal)?;
    Ok(Json(request(&h, &id, Command::State).await?))
}

/// Stream messages for one subscriber: every `every`-th frame by sequence
/// number, and a `dropped` message whenever frames were lost to lag.
pub fn stream_events(frames: broadcast::Receiver<TelemetryFrame>, every: u64) -> impl Stream<Item = StreamMessage> {
    let every = every.max(1);
    BroadcastStream::new(frames).filter_map(move |item| match item {
        Ok(f) if f.seq % every == 0 => Some(StreamMessage::Frame(f)),
        Ok(_) => None,
        Err(BroadcastStreamRecvError::Lagged(n)) => Some(StreamMessage::Dropped(n)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamMessage {
    Frame(TelemetryFrame),
    Dropped(u64),
}

impl StreamMessage {
    fn to_sse(&self) -> SseEvent {
        match self {
            StreamMessage::Frame(f) => SseEvent::default()
                .event("frame")
                .json_data(f)
                .expect("frames serialize to JSON"),
            StreamMessage::Dropped(n) => SseEvent::default()
                .event("dropped")
                .data(serde_json::json!({ "dropped": n }).to_string()),
        }
    }
}

/// Keeps the subscriber count while a stream is open.
struct Subscription(Arc<AtomicUsize>);

impl Drop for Subscription {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::Relaxed);
    }
}

async fn stream(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<StreamQuery>,
) -> Result<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>, ApiError> {
    let h = app.handle(&id)?;
    h.subscribers.fetch_add(1, Ordering::Relaxed);
    let guard = Subscription(h.subscribers.clone());
    let events = stream_events(h.frames.subscribe(), q.every).map(move |m| {
        let _ = &guard;
        Ok(m.to_sse())
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

fn toml_response(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/toml")], body).into_response()
}

async fn log(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let h = app.handle(&id)?;
    Ok(toml_response(request(&h, &id, Command::Log).await?.to_toml()))
}

async fn replay(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let h = app.handle(&id)?;
    Ok(toml_response(request(&h, &id, Command::Replay).await?.to_toml()))
}

async fn csv(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let h = app.handle(&id)?;
    let body = request(&h, &id, Command::Csv).await?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], body).into_response())
}

async fn close(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<serde_json::Value>, ApiError> {
    let h = app
        .sessions
        .write()
        .expect("session registry lock")
        .remove(&id)
        .ok_or_else(|| ApiError::NotFound(id.clone()))?;
    let (tx, rx) = oneshot::channel();
    h.commands
        .send(Command::Close(tx))
        .await
        .map_err(|_| ApiError::NotFound(id.clone()))?;
    let session = rx.await.map_err(|_| ApiError::NotFound(id.clone()))?;
    let runs_dir = app.config.runs_dir.clone();
    let sid = id.clone();
    let dir = tokio::task::spawn_blocking(move || persist_run(&runs_dir, &sid, &session))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(|e| ApiError::Internal(format!("could not store run: {e}")))?;
    log::info!("session {id} closed, run stored in {}", dir.display());
    Ok(Json(serde_json::json!({ "id": id, "run_dir": dir })))
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, config: ServiceConfig) -> std::io::Result<()> {
    axum::serve(listener, router(AppState::new(config))).await
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(seq: u64) -> TelemetryFrame {
        TelemetryFrame {
            seq,
            time_s: seq as f64,
            sensors: Default::default(),
            pressure_pa: 2e6,
            rpm: 0.0,
            flow_total_m3h: 0.0,
            flow_exp_m3h: Default::default(),
            events: vec![],
        }
    }

    #[tokio::test]
    async fn slow_subscriber_loses_the_oldest_frames_and_is_told() {
        let (tx, rx) = broadcast::channel(4);
        for k in 0..10 {
            tx.send(frame(k)).unwrap();
        }
        drop(tx);
        let got: Vec<StreamMessage> = stream_events(rx, 1).collect().await;
        let mut expected = vec![StreamMessage::Dropped(6)];
        expected.extend((6..10).map(|k| StreamMessage::Frame(frame(k))));
        assert_eq!(got, expected);
    }

    #[tokio::test]
    async fn every_nth_frame_by_sequence() {
        let (tx, rx) = broadcast::channel(16);
        for k in 0..7 {
            tx.send(frame(k)).unwrap();
        }
        drop(tx);
        let seqs: Vec<u64> = stream_events(rx, 3)
            .filter_map(|m| match m {
                StreamMessage::Frame(f) => Some(f.seq),
                StreamMessage::Dropped(_) => None,
            })
            .collect()
            .await;
        assert_eq!(seqs, vec![0, 3, 6]);
    }

    #[test]
    fn ratio_bounds() {
        assert!(check_ratio(1.0).is_ok());
        assert!(check_ratio(1000.0).is_ok());
        assert!(check_ratio(0.5).is_err());
        assert!(check_ratio(1001.0).is_err());
    }
}
