//! Per-call lifecycle: state machine, call-length timers, abuse strikes.
//!
//! ```text
//! Created ──activate──▶ Active ──warn──▶ Warned
//!                         │                │
//!                         └────close──▶ Closed(reason) ◀──close──┘
//! ```
//!
//! A session owns its transcript and nothing else survives it: every call to
//! [`Session::create`] starts from an empty history.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{DialogueError, Transcript, Turn};
use crate::persona::{assemble_system_prompt, GuardrailPolicy, ValidatedPersona};

/// Monotonic time source. `now` is measured from an arbitrary fixed epoch.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

/// Wall clock backed by [`Instant`].
#[derive(Debug, Clone)]
pub struct SystemClock {
    epoch: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { epoch: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }
}

/// Manually advanced clock for tests and scripted replays. Clones share time.
#[derive(Debug, Clone, Default)]
pub struct SimClock {
    micros: Arc<AtomicU64>,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, by: Duration) {
        self.micros.fetch_add(by.as_micros() as u64, Ordering::SeqCst);
    }

    /// Moves the clock forward to `to`; never moves it backwards.
    pub fn set(&self, to: Duration) {
        self.micros.fetch_max(to.as_micros() as u64, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now(&self) -> Duration {
        Duration::from_micros(self.micros.load(Ordering::SeqCst))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CloseReason {
    UserEnded,
    TimeLimit,
    AbuseLimit,
    TransportLost,
    ServerShutdown,
}

impl CloseReason {
    pub const ALL: [CloseReason; 5] = [
        CloseReason::UserEnded,
        CloseReason::TimeLimit,
        CloseReason::AbuseLimit,
        CloseReason::TransportLost,
        CloseReason::ServerShutdown,
    ];
}

impl fmt::Display for CloseReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CloseReason::UserEnded => "UserEnded",
            CloseReason::TimeLimit => "TimeLimit",
            CloseReason::AbuseLimit => "AbuseLimit",
            CloseReason::TransportLost => "TransportLost",
            CloseReason::ServerShutdown => "ServerShutdown",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SessionState {
    Created,
    Active,
    Warned,
    Closed(CloseReason),
}

/// Inputs to the state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transition {
    Activate,
    Warn,
    Close(CloseReason),
}

impl SessionState {
    pub fn is_live(self) -> bool {
        matches!(self, SessionState::Active | SessionState::Warned)
    }

    pub fn is_closed(self) -> bool {
        matches!(self, SessionState::Closed(_))
    }

    /// The legal transition table. Everything not listed is rejected.
    pub fn apply(self, t: Transition) -> Result<SessionState, SessionError> {
        use SessionState::*;
        match (self, t) {
            (Created, Transition::Activate) => Ok(Active),
            (Active, Transition::Warn) => Ok(Warned),
            (Active | Warned, Transition::Close(r)) => Ok(Closed(r)),
            (Closed(_), Transition::Close(_)) => Err(SessionError::AlreadyClosed),
            (from, t) => Err(SessionError::IllegalTransition { from, transition: t }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("session is already closed")]
    AlreadyClosed,
    #[error("illegal transition {transition:?} from {from:?}")]
    IllegalTransition { from: SessionState, transition: Transition },
    #[error("session is not active")]
    NotActive,
    #[error("a turn is already in flight")]
    TurnInFlight,
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
    #[error("warning time must be strictly before close time")]
    InvalidTimers,
}

/// Call-length limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionTimers {
    #[serde(with = "secs")]
    pub warn_after: Duration,
    #[serde(with = "secs")]
    pub close_after: Duration,
}

impl Default for SessionTimers {
    fn default() -> Self {
        Self {
            warn_after: Duration::from_secs(480),
            close_after: Duration::from_secs(600),
        }
    }
}

impl SessionTimers {
    pub fn new(warn_after: Duration, close_after: Duration) -> Result<Self, SessionError> {
        if warn_after >= close_after {
            return Err(SessionError::InvalidTimers);
        }
        Ok(Self { warn_after, close_after })
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerEvent {
    WarningDue,
    CloseDue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModerationOutcome {
    Continue,
    CloseDue(CloseReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AbuseCounter {
    strikes: u32,
    limit: u32,
}

impl AbuseCounter {
    pub fn new(limit: u32) -> Self {
        Self { strikes: 0, limit: limit.max(1) }
    }

    pub fn strikes(&self) -> u32 {
        self.strikes
    }

    pub fn limit(&self) -> u32 {
        self.limit
    }

    /// Records one verdict; returns true when a flagged verdict brings the
    /// count to the limit.
    pub fn record(&mut self, flagged: bool) -> bool {
        if !flagged {
            return false;
        }
        self.strikes = (self.strikes + 1).min(self.limit);
        self.strikes == self.limit
    }
}

pub type SessionId = String;

/// One live call.
#[derive(Debug)]
pub struct Session {
    id: SessionId,
    persona: ValidatedPersona,
    policy: GuardrailPolicy,
    goal: String,
    system_prompt: String,
    timers: SessionTimers,
    state: SessionState,
    started_at: Option<Duration>,
    created_at: Duration,
    warning_emitted: bool,
    close_emitted: bool,
    abuse: AbuseCounter,
    transcript: Transcript,
    turn_in_flight: bool,
    turns_started: u64,
}

impl Session {
    /// Creates a fresh session with an empty transcript.
    pub fn create(
        id: impl Into<SessionId>,
        persona: ValidatedPersona,
        policy: GuardrailPolicy,
        goal: impl Into<String>,
        timers: SessionTimers,
        clock: &dyn Clock,
    ) -> Self {
        let id = id.into();
        let goal = goal.into();
        let system_prompt = assemble_system_prompt(&persona, &policy, &goal);
        Self {
            transcript: Transcript::new(id.clone()),
            abuse: AbuseCounter::new(policy.abuse_strike_limit),
            id,
            persona,
            policy,
            goal,
            system_prompt,
            timers,
            state: SessionState::Created,
            started_at: None,
            created_at: clock.now(),
            warning_emitted: false,
            close_emitted: false,
            turn_in_flight: false,
            turns_started: 0,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn persona(&self) -> &ValidatedPersona {
        &self.persona
    }

    pub fn policy(&self) -> &GuardrailPolicy {
        &self.policy
    }

    pub fn goal(&self) -> &str {
        &self.goal
    }

    pub fn system_prompt(&self) -> &str {
        &self.system_prompt
    }

    pub fn timers(&self) -> SessionTimers {
        self.timers
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn strikes(&self) -> u32 {
        self.abuse.strikes()
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn turn_in_flight(&self) -> bool {
        self.turn_in_flight
    }

    /// Starts the call clock.
    pub fn activate(&mut self, clock: &dyn Clock) -> Result<(), SessionError> {
        self.state = self.state.apply(Transition::Activate)?;
        self.started_at = Some(clock.now());
        Ok(())
    }

    /// Time since activation (zero before it).
    pub fn elapsed(&self, now: Duration) -> Duration {
        self.started_at.map_or(Duration::ZERO, |s| now.saturating_sub(s))
    }

    pub fn elapsed_ms(&self, now: Duration) -> u64 {
        self.elapsed(now).as_millis() as u64
    }

    /// Time left before the hard limit.
    pub fn remaining(&self, now: Duration) -> Duration {
        self.timers.close_after.saturating_sub(self.elapsed(now))
    }

    /// Evaluates the call-length timers. Each event is reported at most once.
    ///
    /// If the warning point was never observed before the close point, only
    /// `CloseDue` is reported.
    pub fn tick(&mut self, now: Duration) -> Vec<TimerEvent> {
        if !self.state.is_live() {
            return Vec::new();
        }
        let elapsed = self.elapsed(now);
        let mut events = Vec::new();
        if elapsed >= self.timers.close_after {
            if !self.close_emitted {
                self.close_emitted = true;
                // a warning that was never delivered is moot now
                self.warning_emitted = true;
                events.push(TimerEvent::CloseDue);
            }
        } else if elapsed >= self.timers.warn_after && !self.warning_emitted {
            self.warning_emitted = true;
            self.state = self
                .state
                .apply(Transition::Warn)
                .expect("live session that has not warned is Active");
            events.push(TimerEvent::WarningDue);
        }
        events
    }

    /// Counts a moderation verdict for the latest user utterance.
    pub fn record_moderation_result(&mut self, flagged: bool) -> ModerationOutcome {
        if self.abuse.record(flagged) {
            ModerationOutcome::CloseDue(CloseReason::AbuseLimit)
        } else {
            ModerationOutcome::Continue
        }
    }

    /// Marks the start of a turn. Fails if one is running or the call is not live.
    pub fn begin_turn(&mut self) -> Result<u64, SessionError> {
        if !self.state.is_live() {
            return Err(SessionError::NotActive);
        }
        if self.turn_in_flight {
            return Err(SessionError::TurnInFlight);
        }
        self.turn_in_flight = true;
        self.turns_started += 1;
        Ok(self.turns_started - 1)
    }

    pub fn end_turn(&mut self) {
        self.turn_in_flight = false;
    }

    pub fn append_turn(&mut self, turn: Turn) -> Result<(), SessionError> {
        self.transcript = self.transcript.append_turn(turn)?;
        Ok(())
    }

    /// Closes the call and freezes the transcript.
    pub fn close(mut self, reason: CloseReason) -> Result<ClosedSession, (Session, SessionError)> {
        match self.state.apply(Transition::Close(reason)) {
            Ok(state) => {
                self.state = state;
                Ok(ClosedSession {
                    id: self.id,
                    reason,
                    goal: self.goal,
                    transcript: self.transcript,
                })
            }
            Err(e) => Err((self, e)),
        }
    }

    /// In-place variant of [`Session::close`] for owners that keep the
    /// session behind a lock. The returned transcript is a frozen copy.
    pub fn close_in_place(&mut self, reason: CloseReason) -> Result<ClosedSession, SessionError> {
        self.state = self.state.apply(Transition::Close(reason))?;
        self.turn_in_flight = false;
        Ok(ClosedSession {
            id: self.id.clone(),
            reason,
            goal: self.goal.clone(),
            transcript: std::mem::replace(&mut self.transcript, Transcript::new(self.id.clone())),
        })
    }

    pub fn created_at(&self) -> Duration {
        self.created_at
    }
}

/// What remains after a call ends: the frozen transcript, kept only until
/// feedback is delivered or the client goes away.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedSession {
    pub id: SessionId,
    pub reason: CloseReason,
    pub goal: String,
    pub transcript: Transcript,
}

impl ClosedSession {
    /// Opt-in debugging export. Never called unless configured.
    pub fn export_json(&self, dir: &Path) -> std::io::Result<std::path::PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.json", self.id));
        let body = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(&path, body)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::EmotionLabel;
    use crate::persona::{validate_persona, PersonaSpec, DEFAULT_LANGUAGES};
    use std::collections::BTreeMap;

    fn persona() -> ValidatedPersona {
        validate_persona(
            PersonaSpec {
                agent_name: "Ava".into(),
                personality_traits: vec!["calm".into()],
                background: String::new(),
                premise: "Small talk.".into(),
                user_info: BTreeMap::new(),
                language: "en-US".into(),
                avatar_id: "a".into(),
                voice_id: "v".into(),
            },
            &DEFAULT_LANGUAGES,
        )
        .unwrap()
    }

    fn active(clock: &SimClock) -> Session {
        let mut s = Session::create("s1", persona(), GuardrailPolicy::default(), "", SessionTimers::default(), clock);
        s.activate(clock).unwrap();
        s
    }

    #[test]
    fn create_is_fresh() {
        let clock = SimClock::new();
        let s = Session::create("s1", persona(), GuardrailPolicy::default(), "", SessionTimers::default(), &clock);
        assert_eq!(s.state(), SessionState::Created);
        assert_eq!(s.strikes(), 0);
        assert!(s.transcript().is_empty());
    }

    #[test]
    fn second_session_starts_empty() {
        let clock = SimClock::new();
        let mut a = active(&clock);
        a.append_turn(Turn::user("my secret is 42", 0, false)).unwrap();
        a.append_turn(Turn::agent("noted", EmotionLabel::Neutral, 1)).unwrap();
        let _ = a.close(CloseReason::UserEnded).unwrap();
        let b = active(&clock);
        assert!(b.transcript().is_empty());
    }

    #[test]
    fn warning_boundary() {
        let clock = SimClock::new();
        let mut s = active(&clock);
        assert!(s.tick(Duration::from_millis(479_900)).is_empty());
        assert_eq!(s.tick(Duration::from_secs(480)), vec![TimerEvent::WarningDue]);
        assert_eq!(s.state(), SessionState::Warned);
        assert!(s.tick(Duration::from_secs(481)).is_empty());
        assert_eq!(s.tick(Duration::from_secs(600)), vec![TimerEvent::CloseDue]);
        assert!(s.tick(Duration::from_secs(601)).is_empty());
    }

    #[test]
    fn jump_past_close_reports_close_only() {
        let clock = SimClock::new();
        let mut s = active(&clock);
        assert_eq!(s.tick(Duration::from_secs(600)), vec![TimerEvent::CloseDue]);
        assert!(s.tick(Duration::from_secs(700)).is_empty());
    }

    #[test]
    fn elapsed_is_relative_to_activation() {
        let clock = SimClock::new();
        clock.advance(Duration::from_secs(100));
        let mut s = Session::create("s", persona(), GuardrailPolicy::default(), "", SessionTimers::default(), &clock);
        assert!(s.tick(Duration::from_secs(1000)).is_empty(), "Created sessions have no timers");
        s.activate(&clock).unwrap();
        assert!(s.tick(Duration::from_secs(579)).is_empty());
        assert_eq!(s.tick(Duration::from_secs(580)), vec![TimerEvent::WarningDue]);
    }

    #[test]
    fn closed_session_ticks_nothing() {
        let clock = SimClock::new();
        let mut s = active(&clock);
        s.close_in_place(CloseReason::UserEnded).unwrap();
        assert!(s.tick(Duration::from_secs(900)).is_empty());
    }

    #[test]
    fn strikes() {
        let clock = SimClock::new();
        let mut s = active(&clock);
        assert_eq!(s.record_moderation_result(true), ModerationOutcome::Continue);
        assert_eq!(s.record_moderation_result(true), ModerationOutcome::Continue);
        assert_eq!(s.strikes(), 2);
        assert_eq!(s.record_moderation_result(true), ModerationOutcome::CloseDue(CloseReason::AbuseLimit));
        assert_eq!(s.strikes(), 3);
        assert_eq!(s.record_moderation_result(true), ModerationOutcome::CloseDue(CloseReason::AbuseLimit));
        assert_eq!(s.strikes(), 3);
    }

    #[test]
    fn unflagged_never_strikes() {
        let clock = SimClock::new();
        let mut s = active(&clock);
        for _ in 0..100 {
            assert_eq!(s.record_moderation_result(false), ModerationOutcome::Continue);
        }
        assert_eq!(s.strikes(), 0);
    }

    #[test]
    fn close_transitions() {
        let clock = SimClock::new();
        let s = active(&clock);
        let closed = s.close(CloseReason::UserEnded).unwrap();
        assert_eq!(closed.reason, CloseReason::UserEnded);

        let mut s = active(&clock);
        s.tick(Duration::from_secs(480));
        assert_eq!(s.state(), SessionState::Warned);
        assert_eq!(s.close_in_place(CloseReason::TimeLimit).unwrap().reason, CloseReason::TimeLimit);
        assert_eq!(s.state(), SessionState::Closed(CloseReason::TimeLimit));
        assert_eq!(s.close_in_place(CloseReason::UserEnded), Err(SessionError::AlreadyClosed));
    }

    #[test]
    fn close_keeps_transcript() {
        let clock = SimClock::new();
        let mut s = active(&clock);
        s.append_turn(Turn::user("hello", 0, false)).unwrap();
        let c = s.close_in_place(CloseReason::UserEnded).unwrap();
        assert_eq!(c.transcript.len(), 1);
        assert!(s.transcript().is_empty());
    }

    #[test]
    fn exhaustive_transition_table() {
        // every state × transition pair against the legal set
        let states = [SessionState::Created, SessionState::Active, SessionState::Warned]
            .into_iter()
            .chain(CloseReason::ALL.map(SessionState::Closed));
        let transitions: Vec<Transition> = [Transition::Activate, Transition::Warn]
            .into_iter()
            .chain(CloseReason::ALL.map(Transition::Close))
            .collect();
        for s in states {
            for &t in &transitions {
                let legal = matches!(
                    (s, t),
                    (SessionState::Created, Transition::Activate)
                        | (SessionState::Active, Transition::Warn)
                        | (SessionState::Active | SessionState::Warned, Transition::Close(_))
                );
                assert_eq!(s.apply(t).is_ok(), legal, "{s:?} {t:?}");
            }
        }
    }

    #[test]
    fn turn_in_flight_guard() {
        let clock = SimClock::new();
        let mut s = active(&clock);
        s.begin_turn().unwrap();
        assert_eq!(s.begin_turn(), Err(SessionError::TurnInFlight));
        s.end_turn();
        assert_eq!(s.begin_turn(), Ok(1));
    }

    #[test]
    fn timers_must_be_ordered() {
        assert!(SessionTimers::new(Duration::from_secs(10), Duration::from_secs(10)).is_err());
        assert!(SessionTimers::new(Duration::from_secs(9), Duration::from_secs(10)).is_ok());
    }

    #[test]
    fn export_writes_json() {
        let dir = tempfile::tempdir().unwrap();
        let clock = SimClock::new();
        let mut s = active(&clock);
        s.append_turn(Turn::user("hi", 0, false)).unwrap();
        let c = s.close_in_place(CloseReason::UserEnded).unwrap();
        let p = c.export_json(dir.path()).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap();
        assert_eq!(v["reason"], "UserEnded");
    }
}
