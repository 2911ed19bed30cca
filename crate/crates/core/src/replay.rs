//! Headless scripted conversations against mock providers.
//!
//! A script names a persona (inline or preset id), a goal, and the user's
//! utterances in order:
//!
//! ```json
//! {
//!   "persona_id": "interviewer",
//!   "goal": "Answer behavioural questions concisely.",
//!   "gap_secs": 5,
//!   "utterances": ["Hello!", {"text": "Sorry, I'm late.", "after_secs": 470}]
//! }
//! ```
//!
//! Time is simulated: before each utterance the clock advances by its
//! `after_secs` (or the script's `gap_secs`), and after each reply by the
//! reply's audio duration. Timers are ticked at the configured tick
//! interval along the way, so warnings and time-limit closes show up in the
//! output exactly where the live gateway would have raised them.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;
use tokio::sync::mpsc;

use crate::config::{AppContext, ConfigError, ServerConfig};
use crate::dialogue::{Speaker, Transcript};
use crate::feedback::{generate_feedback, render_feedback_text, FeedbackReport, DEFAULT_GOAL};
use crate::persona::validate_persona;
use crate::pipeline::{close_shared, lock, Orchestrator, SharedSession, TurnOutcome, UtteranceInput};
use crate::protocol::{PersonaSource, ServerMessage};
use crate::session::{Clock, ClosedSession, CloseReason, Session, SimClock, TimerEvent};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("invalid script: {0}")]
    ScriptParse(String),
    #[error("cannot read script {path}: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid persona: {0}")]
    Persona(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ScriptedUtterance {
    Text(String),
    Timed { text: String, after_secs: f64 },
}

impl ScriptedUtterance {
    pub fn text(&self) -> &str {
        match self {
            Self::Text(t) | Self::Timed { text: t, .. } => t,
        }
    }
}

fn default_gap_secs() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayScript {
    #[serde(flatten)]
    pub persona: PersonaSource,
    #[serde(default)]
    pub goal: String,
    #[serde(default = "default_gap_secs")]
    pub gap_secs: f64,
    pub utterances: Vec<ScriptedUtterance>,
}

impl ReplayScript {
    pub fn from_json_str(raw: &str) -> Result<Self, ReplayError> {
        let script: Self = serde_json::from_str(raw).map_err(|e| ReplayError::ScriptParse(e.to_string()))?;
        if script.utterances.is_empty() {
            return Err(ReplayError::ScriptParse("script has no utterances".into()));
        }
        if let Some(i) = script.utterances.iter().position(|u| u.text().trim().is_empty()) {
            return Err(ReplayError::ScriptParse(format!("utterance {i} is empty")));
        }
        let gaps = std::iter::once(script.gap_secs).chain(script.utterances.iter().filter_map(|u| match u {
            ScriptedUtterance::Timed { after_secs, .. } => Some(*after_secs),
            ScriptedUtterance::Text(_) => None,
        }));
        for g in gaps {
            if !g.is_finite() || g < 0.0 {
                return Err(ReplayError::ScriptParse(format!("time gap {g} must be a non-negative number")));
            }
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, ReplayError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ReplayError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        Self::from_json_str(&raw)
    }
}

#[derive(Debug, Clone)]
pub struct ReplayOutput {
    pub text: String,
    pub close_reason: CloseReason,
    pub transcript: Transcript,
    pub feedback: Option<FeedbackReport>,
}

impl std::fmt::Display for ReplayOutput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text)
    }
}

fn stamp(ms: u64) -> String {
    format!("{:02}:{:02}.{:03}", ms / 60_000, ms / 1000 % 60, ms % 1000)
}

/// Runs a script with the config's mock providers.
pub async fn replay_with_config(script: &ReplayScript, cfg: &ServerConfig, seed: u64) -> Result<ReplayOutput, ReplayError> {
    let ctx = AppContext::with_providers(cfg, cfg.mock_providers()?)?;
    replay(script, &ctx, seed).await
}

struct Driver<'a> {
    ctx: &'a AppContext,
    clock: SimClock,
    session: SharedSession,
    out: String,
    closed: Option<ClosedSession>,
}

impl Driver<'_> {
    fn elapsed_ms(&self) -> u64 {
        lock(&self.session).elapsed_ms(self.clock.now())
    }

    /// Advances the clock in tick steps, reporting timer events.
    fn advance(&mut self, by: Duration) {
        // the clock counts whole microseconds
        let target = Duration::from_micros((self.clock.now() + by).as_micros() as u64);
        while self.closed.is_none() {
            // ticks fall on a fixed grid from the session epoch
            let tick = self.ctx.tick.as_micros().max(1);
            let now = self.clock.now().as_micros();
            let next = Duration::from_micros(((now / tick + 1) * tick) as u64).min(target);
            self.clock.set(next);
            let now = self.clock.now();
            let (events, remaining) = {
                let mut s = lock(&self.session);
                (s.tick(now), s.remaining(now))
            };
            for ev in events {
                match ev {
                    TimerEvent::WarningDue => {
                        let _ = writeln!(
                            self.out,
                            "[{}] -- time warning: {} remaining --",
                            stamp(self.elapsed_ms()),
                            &stamp(remaining.as_millis() as u64)[..5]
                        );
                    }
                    TimerEvent::CloseDue => self.close(CloseReason::TimeLimit),
                }
            }
            if now >= target {
                break;
            }
        }
    }

    fn close(&mut self, reason: CloseReason) {
        let at = self.elapsed_ms();
        if let Ok(closed) = close_shared(&self.session, reason) {
            self.note_closed(closed, at);
        }
    }

    fn note_closed(&mut self, closed: ClosedSession, at_ms: u64) {
        let _ = writeln!(self.out, "[{}] -- session closed: {} --", stamp(at_ms), closed.reason);
        self.closed = Some(closed);
    }
}

/// Runs a script in-process on a simulated clock. Output depends only on
/// the script, the context's providers and assets, and `seed`.
pub async fn replay(script: &ReplayScript, ctx: &AppContext, seed: u64) -> Result<ReplayOutput, ReplayError> {
    let persona = match &script.persona {
        PersonaSource::Persona(spec) => validate_persona(spec.clone(), &ctx.languages).map_err(|errors| {
            ReplayError::Persona(errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
        })?,
        PersonaSource::PersonaId(id) => ctx
            .personas
            .get(id)
            .cloned()
            .ok_or_else(|| ReplayError::Persona(format!("no persona preset `{id}`")))?,
    };
    let orch = &ctx.orchestrator;
    let orch = Orchestrator::new(orch.providers().clone(), Arc::clone(orch.library()), orch.budgets(), seed);
    let clock = SimClock::new();
    let session_id = format!("replay-{seed:016x}");
    let goal = script.goal.trim().to_string();

    let mut head = String::new();
    let _ = writeln!(head, "session: {session_id}");
    let _ = writeln!(head, "persona: {} ({})", persona.agent_name, persona.language);
    let _ = writeln!(head, "goal: {}", if goal.is_empty() { DEFAULT_GOAL } else { &goal });
    head.push('\n');

    let mut session = Session::create(session_id, persona, ctx.policy.clone(), goal.clone(), ctx.timers, &clock);
    session.activate(&clock).expect("fresh session activates");
    let mut d = Driver { ctx, clock, session: Arc::new(Mutex::new(session)), out: head, closed: None };

    for u in &script.utterances {
        let gap = match u {
            ScriptedUtterance::Timed { after_secs, .. } => *after_secs,
            ScriptedUtterance::Text(_) => script.gap_secs,
        };
        d.advance(Duration::from_secs_f64(gap));
        if d.closed.is_some() {
            break;
        }
        let at = d.elapsed_ms();
        let (tx, mut rx) = mpsc::unbounded_channel();
        let outcome = orch
            .run_turn(&d.session, &d.clock, UtteranceInput::Text(u.text().to_string()), &tx)
            .await
            .expect("driver runs one turn at a time on a live session");
        drop(tx);
        let mut agent_ms = at;
        while let Some(m) = rx.recv().await {
            match m {
                ServerMessage::UserTranscript { text } => {
                    let _ = writeln!(d.out, "[{}] USER: {text}", stamp(at));
                }
                ServerMessage::Error { code, message } => {
                    let _ = writeln!(d.out, "[{}] -- turn aborted ({code:?}): {message} --", stamp(at));
                }
                _ => {}
            }
        }
        match outcome {
            TurnOutcome::Completed { duration_ms, .. } => {
                if let Some(t) = lock(&d.session).transcript().last() {
                    agent_ms = t.started_at_ms();
                    let emotion = t.emotion().map(|e| e.as_str()).unwrap_or("?");
                    let _ = writeln!(d.out, "[{}] AGENT ({emotion}): {}", stamp(agent_ms), t.text());
                }
                d.advance(Duration::from_millis(duration_ms));
            }
            TurnOutcome::Closed(closed) => d.note_closed(closed, agent_ms),
            TurnOutcome::Aborted(_) => {}
        }
        if d.closed.is_some() {
            break;
        }
    }
    if d.closed.is_none() {
        d.close(CloseReason::UserEnded);
    }
    let closed = d.closed.take().expect("session closed above");
    let mut out = d.out;

    let _ = writeln!(out, "\nclose reason: {}", closed.reason);
    let _ = writeln!(
        out,
        "turns: {} ({} user, {} agent)",
        closed.transcript.len(),
        closed.transcript.user_turn_count(),
        closed.transcript.turns().iter().filter(|t| t.speaker() == Speaker::Agent).count()
    );

    out.push_str("\n== feedback ==\n");
    let goal = if closed.goal.is_empty() { DEFAULT_GOAL } else { closed.goal.as_str() };
    let feedback = match generate_feedback(&*orch.providers().llm, &closed.transcript, goal, orch.budgets().llm).await {
        Ok(report) => {
            out.push_str(&render_feedback_text(&report));
            Some(report)
        }
        Err(e) => {
            let _ = writeln!(out, "feedback unavailable: {e}");
            None
        }
    };
    if !out.ends_with('\n') {
        out.push('\n');
    }
    Ok(ReplayOutput { text: out, close_reason: closed.reason, transcript: closed.transcript, feedback })
}
