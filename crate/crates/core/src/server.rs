//! WebSocket gateway: one session per connection.
//!
//! Each connection is owned by a single task that processes client frames,
//! timer ticks and turn completions sequentially. Turns run on a child task
//! so timers keep firing while providers are busy; outbound messages from
//! both go through one channel, so per-connection order is preserved.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::serve::ListenerExt;
use axum::Router;
use futures::{SinkExt, StreamExt};
use thiserror::Error;
use tokio::sync::mpsc::{self, UnboundedReceiver, UnboundedSender};
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;
use tokio_util::task::TaskTracker;

use crate::config::AppContext;
use crate::feedback::{generate_feedback, FeedbackError, DEFAULT_GOAL};
use crate::persona::validate_persona;
use crate::pipeline::{close_shared, lock, SharedSession, TurnError, TurnOutcome, UtteranceInput};
use crate::protocol::{
    decode_message, encode_message, ClientMessage, ErrorCode, PersonaSource, ServerMessage, WireFrame,
};
use crate::providers::{AudioChunk, AudioUtterance, STT_SAMPLE_RATE};
use crate::session::{ClosedSession, CloseReason, Session, TimerEvent};

/// Longest user utterance accepted over the audio path.
pub const MAX_UTTERANCE_SECS: usize = 120;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
}

/// Live counters, mainly for tests and operators.
#[derive(Debug, Default)]
pub struct ServerStats {
    opened: AtomicU64,
    active: AtomicU64,
    closed: Mutex<BTreeMap<CloseReason, u64>>,
}

impl ServerStats {
    pub fn sessions_opened(&self) -> u64 {
        self.opened.load(Ordering::SeqCst)
    }

    /// Connections still being served, including closed sessions waiting
    /// for a feedback request.
    pub fn active_connections(&self) -> u64 {
        self.active.load(Ordering::SeqCst)
    }

    pub fn closed_with(&self, reason: CloseReason) -> u64 {
        self.closed.lock().unwrap_or_else(|p| p.into_inner()).get(&reason).copied().unwrap_or(0)
    }

    fn record_close(&self, reason: CloseReason) {
        *self.closed.lock().unwrap_or_else(|p| p.into_inner()).entry(reason).or_default() += 1;
    }
}

#[derive(Clone)]
struct Shared {
    ctx: AppContext,
    stats: Arc<ServerStats>,
    shutdown: CancellationToken,
    tracker: TaskTracker,
}

pub struct ServerHandle {
    local_addr: SocketAddr,
    shared: Shared,
    task: JoinHandle<std::io::Result<()>>,
}

impl std::fmt::Debug for ServerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerHandle").field("local_addr", &self.local_addr).finish_non_exhaustive()
    }
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn stats(&self) -> Arc<ServerStats> {
        Arc::clone(&self.shared.stats)
    }

    /// Closes every open session with `ServerShutdown` and waits for all
    /// connections to finish.
    pub async fn shutdown(self) -> std::io::Result<()> {
        self.shared.shutdown.cancel();
        self.shared.tracker.close();
        self.shared.tracker.wait().await;
        self.task.await.unwrap_or_else(|e| Err(std::io::Error::other(e)))
    }
}

pub fn router(ctx: AppContext) -> Router {
    router_with(Shared {
        ctx,
        stats: Arc::default(),
        shutdown: CancellationToken::new(),
        tracker: TaskTracker::new(),
    })
}

fn router_with(shared: Shared) -> Router {
    Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(shared)
}

pub async fn serve(ctx: AppContext, bind: &str) -> Result<ServerHandle, ServeError> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|source| ServeError::Bind { addr: bind.to_string(), source })?;
    let local_addr = listener
        .local_addr()
        .map_err(|source| ServeError::Bind { addr: bind.to_string(), source })?;
    let shared = Shared {
        ctx,
        stats: Arc::default(),
        shutdown: CancellationToken::new(),
        tracker: TaskTracker::new(),
    };
    let app = router_with(shared.clone());
    let token = shared.shutdown.clone();
    let task = tokio::spawn(async move {
        // replies are many small frames; Nagle would hold them back
        let listener = listener.tap_io(|tcp| {
            if let Err(e) = tcp.set_nodelay(true) {
                tracing::debug!(error = %e, "could not set TCP_NODELAY");
            }
        });
        axum::serve(listener, app).with_graceful_shutdown(token.cancelled_owned()).await
    });
    tracing::info!(%local_addr, "listening");
    Ok(ServerHandle { local_addr, shared, task })
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(shared): State<Shared>) -> impl IntoResponse {
    let token = shared.tracker.token();
    ws.on_upgrade(move |socket| async move {
        let _token = token;
        shared.stats.active.fetch_add(1, Ordering::SeqCst);
        Connection::new(shared.clone()).run(socket).await;
        shared.stats.active.fetch_sub(1, Ordering::SeqCst);
    })
}

fn to_ws(frame: WireFrame) -> Message {
    match frame {
        WireFrame::Text(t) => Message::Text(t.into()),
        WireFrame::Binary(b) => Message::Binary(b.into()),
    }
}

async fn write_loop(mut sink: futures::stream::SplitSink<WebSocket, Message>, mut rx: UnboundedReceiver<ServerMessage>) {
    while let Some(msg) = rx.recv().await {
        if sink.send(to_ws(encode_message(&msg))).await.is_err() {
            return;
        }
    }
    let _ = sink.send(Message::Close(None)).await;
}

enum Phase {
    AwaitHello,
    Live { session: SharedSession, audio: Vec<AudioChunk> },
    Closed { closed: Option<ClosedSession> },
}

type TurnTask = JoinHandle<Result<TurnOutcome, TurnError>>;

struct Connection {
    shared: Shared,
    out: UnboundedSender<ServerMessage>,
    rx: Option<UnboundedReceiver<ServerMessage>>,
    phase: Phase,
    turn: Option<TurnTask>,
}

async fn join_turn(turn: &mut Option<TurnTask>) -> Result<Result<TurnOutcome, TurnError>, tokio::task::JoinError> {
    match turn {
        Some(t) => t.await,
        None => std::future::pending().await,
    }
}

impl Connection {
    fn new(shared: Shared) -> Self {
        let (out, rx) = mpsc::unbounded_channel();
        Self { shared, out, rx: Some(rx), phase: Phase::AwaitHello, turn: None }
    }

    fn send(&self, msg: ServerMessage) {
        let _ = self.out.send(msg);
    }

    fn error(&self, code: ErrorCode, message: impl Into<String>) {
        self.send(ServerMessage::error(code, message));
    }

    async fn run(mut self, socket: WebSocket) {
        let (sink, mut stream) = socket.split();
        let writer = tokio::spawn(write_loop(sink, self.rx.take().expect("receiver present")));
        let mut ticker = tokio::time::interval(self.shared.ctx.tick);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        let shutdown = self.shared.shutdown.clone();
        let grace = tokio::time::sleep(Duration::MAX / 4);
        tokio::pin!(grace);

        loop {
            let live = matches!(self.phase, Phase::Live { .. });
            let closed = matches!(self.phase, Phase::Closed { .. });
            tokio::select! {
                biased;
                _ = shutdown.cancelled() => {
                    if live {
                        self.close(CloseReason::ServerShutdown).await;
                    }
                    break;
                }
                joined = join_turn(&mut self.turn) => {
                    self.turn = None;
                    self.on_turn_done(joined);
                    if matches!(self.phase, Phase::Closed { .. }) {
                        grace.as_mut().reset(tokio::time::Instant::now() + self.shared.ctx.feedback_grace);
                    }
                }
                _ = ticker.tick(), if live => {
                    self.on_tick().await;
                    if matches!(self.phase, Phase::Closed { .. }) {
                        grace.as_mut().reset(tokio::time::Instant::now() + self.shared.ctx.feedback_grace);
                    }
                }
                _ = &mut grace, if closed => break,
                frame = stream.next() => {
                    let frame = match frame {
                        Some(Ok(Message::Text(t))) => WireFrame::Text(t.to_string()),
                        Some(Ok(Message::Binary(b))) => WireFrame::Binary(b.to_vec()),
                        Some(Ok(Message::Ping(_) | Message::Pong(_))) => continue,
                        Some(Ok(Message::Close(_))) | Some(Err(_)) | None => {
                            if live {
                                self.close(CloseReason::TransportLost).await;
                            }
                            break;
                        }
                    };
                    match decode_message::<ClientMessage>(&frame) {
                        Ok(msg) => self.on_message(msg).await,
                        Err(e) => self.error(ErrorCode::DecodeError, e.to_string()),
                    }
                    if !closed && matches!(self.phase, Phase::Closed { .. }) {
                        grace.as_mut().reset(tokio::time::Instant::now() + self.shared.ctx.feedback_grace);
                    }
                }
            }
        }

        if let Some(t) = self.turn.take() {
            t.abort();
            let _ = t.await;
        }
        // dropping the transcript here is what makes the session memoryless
        self.phase = Phase::AwaitHello;
        drop(self.out);
        let _ = writer.await;
    }

    fn on_turn_done(&mut self, joined: Result<Result<TurnOutcome, TurnError>, tokio::task::JoinError>) {
        match joined {
            Ok(Ok(TurnOutcome::Closed(closed))) => self.finish_close(closed),
            Ok(Ok(_)) => {}
            Ok(Err(TurnError::TurnInFlight)) => self.error(ErrorCode::TurnInFlight, "a turn is already in flight"),
            Ok(Err(TurnError::NotActive)) => self.error(ErrorCode::SessionClosed, "session is not active"),
            Err(e) if e.is_cancelled() => {}
            Err(e) => {
                tracing::error!(error = %e, "turn task failed");
                self.error(ErrorCode::Internal, "turn failed");
            }
        }
    }

    async fn on_tick(&mut self) {
        let Phase::Live { session, .. } = &self.phase else { return };
        let now = self.shared.ctx.clock.now();
        let (events, remaining) = {
            let mut s = lock(session);
            (s.tick(now), s.remaining(now))
        };
        for ev in events {
            match ev {
                TimerEvent::WarningDue => {
                    self.send(ServerMessage::TimeWarning { remaining_ms: remaining.as_millis() as u64 })
                }
                TimerEvent::CloseDue => {
                    self.close(CloseReason::TimeLimit).await;
                    return;
                }
            }
        }
    }

    /// Stops any running turn, then closes the live session.
    async fn close(&mut self, reason: CloseReason) {
        if let Some(t) = self.turn.take() {
            t.abort();
            if let Ok(Ok(TurnOutcome::Closed(closed))) = t.await {
                // the turn hit the abuse limit and already announced it
                self.finish_close(closed);
                return;
            }
        }
        let Phase::Live { session, .. } = &self.phase else { return };
        match close_shared(session, reason) {
            Ok(closed) => {
                self.send(ServerMessage::SessionClosed { reason });
                self.finish_close(closed);
            }
            Err(e) => tracing::warn!(error = %e, "close on non-live session"),
        }
    }

    fn finish_close(&mut self, closed: ClosedSession) {
        tracing::info!(session = %closed.id, reason = %closed.reason, turns = closed.transcript.len(), "session closed");
        self.shared.stats.record_close(closed.reason);
        if let Some(dir) = &self.shared.ctx.export_dir {
            if let Err(e) = closed.export_json(dir) {
                tracing::warn!(error = %e, "transcript export failed");
            }
        }
        self.phase = Phase::Closed { closed: Some(closed) };
    }

    async fn on_message(&mut self, msg: ClientMessage) {
        match (&mut self.phase, msg) {
            (Phase::AwaitHello, ClientMessage::Hello { persona, goal }) => self.on_hello(persona, goal),
            (Phase::AwaitHello, _) => self.error(ErrorCode::ProtocolViolation, "hello must be the first message"),

            (_, ClientMessage::Hello { .. }) => self.error(ErrorCode::ProtocolViolation, "hello already received"),

            (Phase::Live { .. }, ClientMessage::EndCall) => self.close(CloseReason::UserEnded).await,
            (Phase::Live { .. }, ClientMessage::RequestFeedback) => {
                self.error(ErrorCode::SessionNotClosed, "feedback is available after the call ends")
            }
            (Phase::Live { .. }, ClientMessage::UtteranceText { text }) => self.start_turn(UtteranceInput::Text(text)),
            (Phase::Live { audio, .. }, ClientMessage::UtteranceAudioChunk(chunk)) => {
                let buffered: usize = audio.iter().map(|c| c.samples.len()).sum();
                if self.turn.is_some() {
                    self.error(ErrorCode::TurnInFlight, "a turn is already in flight");
                } else if buffered + chunk.samples.len() > MAX_UTTERANCE_SECS * STT_SAMPLE_RATE as usize {
                    audio.clear();
                    self.error(ErrorCode::ProtocolViolation, "utterance too long");
                } else {
                    audio.push(chunk);
                }
            }
            (Phase::Live { audio, .. }, ClientMessage::UtteranceEnd { sidecar_text }) => {
                let chunks = std::mem::take(audio);
                self.start_turn(UtteranceInput::Audio(AudioUtterance { chunks, sidecar_text }));
            }

            (Phase::Closed { closed }, ClientMessage::RequestFeedback) => {
                let Some(c) = closed.take() else {
                    return self.error(ErrorCode::FeedbackUnavailable, "feedback was already delivered");
                };
                let goal = if c.goal.trim().is_empty() { DEFAULT_GOAL } else { c.goal.as_str() };
                let orch = &self.shared.ctx.orchestrator;
                let result =
                    generate_feedback(&*orch.providers().llm, &c.transcript, goal, orch.budgets().llm).await;
                match result {
                    Ok(report) => self.send(ServerMessage::FeedbackReport { report }),
                    Err(FeedbackError::EmptyTranscript) => {
                        self.error(ErrorCode::EmptyTranscript, FeedbackError::EmptyTranscript.to_string())
                    }
                    Err(e) => {
                        self.error(ErrorCode::FeedbackFailed, e.to_string());
                        // keep the transcript so the client can retry
                        if let Phase::Closed { closed } = &mut self.phase {
                            *closed = Some(c);
                        }
                    }
                }
            }
            (Phase::Closed { .. }, _) => self.error(ErrorCode::SessionClosed, "session is closed"),
        }
    }

    fn on_hello(&mut self, source: PersonaSource, goal: String) {
        let ctx = &self.shared.ctx;
        let persona = match source {
            PersonaSource::Persona(spec) => match validate_persona(spec, &ctx.languages) {
                Ok(p) => p,
                Err(errors) => {
                    let msg = errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
                    return self.error(ErrorCode::InvalidPersona, msg);
                }
            },
            PersonaSource::PersonaId(id) => match ctx.personas.get(&id) {
                Some(p) => p.clone(),
                None => return self.error(ErrorCode::UnknownPersona, format!("no persona preset `{id}`")),
            },
        };
        let id = uuid::Uuid::new_v4().to_string();
        let clock = &*ctx.clock;
        let mut session = Session::create(id.clone(), persona, ctx.policy.clone(), goal.trim(), ctx.timers, clock);
        session.activate(clock).expect("fresh session activates");
        self.shared.stats.opened.fetch_add(1, Ordering::SeqCst);
        tracing::info!(session = %id, "session ready");
        let library = ctx.orchestrator.library();
        self.send(ServerMessage::SessionReady {
            session_id: id,
            channels: library.channels().to_vec(),
            fps: library.fps(),
        });
        self.phase = Phase::Live { session: Arc::new(Mutex::new(session)), audio: Vec::new() };
    }

    fn start_turn(&mut self, input: UtteranceInput) {
        let Phase::Live { session, .. } = &self.phase else { return };
        if self.turn.is_some() {
            return self.error(ErrorCode::TurnInFlight, "a turn is already in flight");
        }
        let (session, out) = (Arc::clone(session), self.out.clone());
        let ctx = self.shared.ctx.clone();
        self.turn = Some(tokio::spawn(async move {
            ctx.orchestrator.run_turn(&session, &*ctx.clock, input, &out).await
        }));
    }
}
