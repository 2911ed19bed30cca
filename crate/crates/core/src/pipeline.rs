//! One conversational turn, from user utterance to streamed agent reply.
//!
//! ```text
//! audio ─▶ STT ─▶ moderation ─▶ LLM ─▶ parse ─┬─▶ TTS ──────────────┬─▶ stream
//! text ───────────▲                           └─▶ clip selection ───┘
//! ```
//!
//! The session lock is only held for short synchronous steps, never across
//! a provider call, so the owning connection can keep ticking timers while a
//! turn runs.

use std::sync::{Arc, Mutex, MutexGuard};

use tokio::sync::mpsc::UnboundedSender;

use crate::dialogue::{build_llm_request, parse_emotion_tagged_reply, DialogueError, EmotionLabel, Turn};
use crate::expression::{build_animation_track, select_clip, AnimationTrack, ClipLibrary};
use crate::protocol::{ErrorCode, ServerMessage, MAX_FRAMES_PER_CHUNK};
use crate::providers::{
    complete, moderate, synthesize, transcribe, AudioUtterance, ProviderBudgets, ProviderError, Providers,
    Synthesis, SynthesisRequest,
};
use crate::session::{Clock, ClosedSession, CloseReason, ModerationOutcome, Session, SessionError};

pub type SharedSession = Arc<Mutex<Session>>;

pub fn lock(session: &SharedSession) -> MutexGuard<'_, Session> {
    session.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UtteranceInput {
    Text(String),
    Audio(AudioUtterance),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TurnOutcome {
    Completed { emotion: EmotionLabel, duration_ms: u64 },
    /// The turn was abandoned; an `Error` message was emitted unless the
    /// session closed underneath it.
    Aborted(ErrorCode),
    /// The utterance reached the abuse limit and closed the session.
    Closed(ClosedSession),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TurnError {
    #[error("a turn is already in flight")]
    TurnInFlight,
    #[error("session is not active")]
    NotActive,
}

impl From<&ProviderError> for ErrorCode {
    fn from(e: &ProviderError) -> Self {
        match e {
            ProviderError::Unavailable { .. } => ErrorCode::ProviderUnavailable,
            ProviderError::Timeout { .. } => ErrorCode::ProviderTimeout,
            ProviderError::StreamCorrupt { .. } => ErrorCode::StreamCorrupt,
            ProviderError::InvalidRequest(_) => ErrorCode::ProtocolViolation,
            ProviderError::InvalidResponse { .. } => ErrorCode::ProviderInvalidResponse,
        }
    }
}

/// Clears the in-flight flag however the turn ends, including cancellation.
struct InFlight(SharedSession);

impl Drop for InFlight {
    fn drop(&mut self) {
        lock(&self.0).end_turn();
    }
}

/// Shared, immutable turn machinery: providers, clip library and budgets.
pub struct Orchestrator {
    providers: Providers,
    library: Arc<ClipLibrary>,
    budgets: ProviderBudgets,
    seed: u64,
}

fn mix_seed(seed: u64, turn: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ turn.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Orchestrator {
    pub fn new(providers: Providers, library: Arc<ClipLibrary>, budgets: ProviderBudgets, seed: u64) -> Self {
        Self { providers, library, budgets, seed }
    }

    pub fn providers(&self) -> &Providers {
        &self.providers
    }

    pub fn library(&self) -> &Arc<ClipLibrary> {
        &self.library
    }

    pub fn budgets(&self) -> ProviderBudgets {
        self.budgets
    }

    /// Runs one half-duplex turn, emitting messages to `out` as they become
    /// available.
    pub async fn run_turn(
        &self,
        session: &SharedSession,
        clock: &dyn Clock,
        input: UtteranceInput,
        out: &UnboundedSender<ServerMessage>,
    ) -> Result<TurnOutcome, TurnError> {
        let (turn_index, language, voice_id) = {
            let mut s = lock(session);
            let idx = s.begin_turn().map_err(|e| match e {
                SessionError::TurnInFlight => TurnError::TurnInFlight,
                _ => TurnError::NotActive,
            })?;
            (idx, s.persona().language.clone(), s.persona().voice_id.clone())
        };
        let _guard = InFlight(Arc::clone(session));
        let emit = |m: ServerMessage| {
            let _ = out.send(m);
        };
        let abort = |code: ErrorCode, message: String| {
            emit(ServerMessage::error(code, message));
            Ok(TurnOutcome::Aborted(code))
        };

        let user_started_ms = lock(session).elapsed_ms(clock.now());
        let text = match input {
            UtteranceInput::Text(t) => t,
            UtteranceInput::Audio(audio) => {
                match transcribe(&*self.providers.stt, &audio, &language, self.budgets.stt).await {
                    Ok(t) => t,
                    Err(e) => return abort((&e).into(), e.to_string()),
                }
            }
        };
        let text = text.trim().to_string();
        if text.is_empty() {
            return abort(ErrorCode::EmptyUtterance, DialogueError::EmptyUtterance.to_string());
        }
        emit(ServerMessage::UserTranscript { text: text.clone() });

        let score = match moderate(&*self.providers.moderation, &text, self.budgets.moderation).await {
            Ok(s) => s,
            Err(e) => return abort((&e).into(), e.to_string()),
        };

        let (request, flagged) = {
            let mut s = lock(session);
            if !s.state().is_live() {
                return Ok(TurnOutcome::Aborted(ErrorCode::SessionClosed));
            }
            let flagged = s.policy().is_flagged(score);
            if let ModerationOutcome::CloseDue(reason) = s.record_moderation_result(flagged) {
                let _ = s.append_turn(Turn::user(text.clone(), user_started_ms, true));
                let closed = s.close_in_place(reason).expect("live session closes");
                emit(ServerMessage::SessionClosed { reason });
                return Ok(TurnOutcome::Closed(closed));
            }
            let request = build_llm_request(s.system_prompt(), s.transcript(), &text)
                .expect("utterance checked non-empty");
            (request, flagged)
        };

        let raw = match complete(&*self.providers.llm, &request, self.budgets.llm).await {
            Ok(r) => r,
            Err(e) => return abort((&e).into(), e.to_string()),
        };
        let reply = match parse_emotion_tagged_reply(&raw) {
            Ok(r) => r,
            Err(e) => return abort(ErrorCode::EmptyReply, e.to_string()),
        };
        if reply.parse_fallback {
            tracing::debug!(turn_index, "reply had no usable emotion header");
        }

        let synth_req = SynthesisRequest {
            text: reply.text.clone(),
            emotion: reply.emotion,
            voice_id,
            language,
        };
        let clip_seed = mix_seed(self.seed, turn_index);
        let (synth, clip) = tokio::join!(
            synthesize(&*self.providers.tts, &synth_req, self.budgets.tts),
            async { select_clip(&self.library, reply.emotion, clip_seed) },
        );
        let synth = match synth {
            Ok(s) => s,
            Err(e) => return abort((&e).into(), e.to_string()),
        };
        let track = build_animation_track(clip, synth.duration_ms);

        {
            let mut s = lock(session);
            if !s.state().is_live() {
                return Ok(TurnOutcome::Aborted(ErrorCode::SessionClosed));
            }
            let agent_started_ms = s.elapsed_ms(clock.now()).max(user_started_ms);
            let committed = s
                .append_turn(Turn::user(text, user_started_ms, flagged))
                .and_then(|()| s.append_turn(Turn::agent(reply.text.clone(), reply.emotion, agent_started_ms)));
            if let Err(e) = committed {
                return abort(ErrorCode::Internal, e.to_string());
            }
        }

        emit(ServerMessage::AgentReplyStart { emotion: reply.emotion, duration_ms: synth.duration_ms });
        for m in interleave_reply(synth, &track) {
            emit(m);
        }
        emit(ServerMessage::AgentReplyEnd);
        Ok(TurnOutcome::Completed { emotion: reply.emotion, duration_ms: track.duration_ms })
    }
}

/// Audio and animation chunk messages merged by start time. On a tie the
/// audio chunk goes first.
pub fn interleave_reply(synth: Synthesis, track: &AnimationTrack) -> Vec<ServerMessage> {
    let mut audio = Vec::with_capacity(synth.chunks.len());
    let mut offset = 0usize;
    for c in synth.chunks {
        let start = offset as f64 * 1000.0 / c.sample_rate as f64;
        offset += c.samples.len();
        audio.push((start, ServerMessage::AgentAudioChunk(c)));
    }
    let anim = track
        .frames
        .chunks(MAX_FRAMES_PER_CHUNK)
        .enumerate()
        .map(|(i, frames)| {
            let first = i * MAX_FRAMES_PER_CHUNK;
            (
                track.frame_time_ms(first),
                ServerMessage::AgentAnimationChunk { first_frame_index: first, frames: frames.to_vec() },
            )
        });

    let mut out = Vec::with_capacity(audio.len() + track.frames.len() / MAX_FRAMES_PER_CHUNK + 1);
    let mut audio = audio.into_iter().peekable();
    let mut anim = anim.peekable();
    loop {
        let take_audio = match (audio.peek(), anim.peek()) {
            (Some((a, _)), Some((b, _))) => a <= b,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => break,
        };
        let next = if take_audio { audio.next() } else { anim.next() };
        out.extend(next.map(|(_, m)| m));
    }
    out
}

/// Closes a shared session, returning its frozen transcript.
pub fn close_shared(session: &SharedSession, reason: CloseReason) -> Result<ClosedSession, SessionError> {
    lock(session).close_in_place(reason)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expression::{load_clip_library, frames_for_duration};
    use crate::persona::{validate_persona, GuardrailPolicy, PersonaSpec, DEFAULT_LANGUAGES};
    use crate::providers::mock::{Delayed, MockLlm, MockModeration, MockStt, Unavailable};
    use crate::providers::{AudioChunk, STT_SAMPLE_RATE};
    use crate::session::{SessionTimers, SimClock};
    use std::collections::BTreeMap;
    use std::path::Path;
    use std::time::Duration;
    use tokio::sync::mpsc;

    fn library() -> Arc<ClipLibrary> {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/clips/sample_library.json");
        Arc::new(load_clip_library(&p).unwrap())
    }

    fn session(clock: &SimClock) -> SharedSession {
        let persona = validate_persona(
            PersonaSpec {
                agent_name: "Ava".into(),
                personality_traits: vec!["friendly".into()],
                background: String::new(),
                premise: "Coffee chat.".into(),
                user_info: BTreeMap::new(),
                language: "en-US".into(),
                avatar_id: "a".into(),
                voice_id: "v".into(),
            },
            &DEFAULT_LANGUAGES,
        )
        .unwrap();
        let mut s = Session::create("t", persona, GuardrailPolicy::default(), "", SessionTimers::default(), clock);
        s.activate(clock).unwrap();
        Arc::new(Mutex::new(s))
    }

    fn orchestrator(providers: Providers) -> Orchestrator {
        Orchestrator::new(providers, library(), ProviderBudgets::default(), 7)
    }

    fn mocks() -> Providers {
        Providers::mock(
            MockLlm::with_cues([("insult me", "EMOTION: Angry\nPlease stop.")]),
            MockModeration::new(["stupid"]),
        )
    }

    async fn turn(o: &Orchestrator, s: &SharedSession, clock: &SimClock, input: UtteranceInput) -> (TurnOutcome, Vec<ServerMessage>) {
        let (tx, mut rx) = mpsc::unbounded_channel();
        let outcome = o.run_turn(s, clock, input, &tx).await.unwrap();
        drop(tx);
        let mut msgs = Vec::new();
        while let Some(m) = rx.recv().await {
            msgs.push(m);
        }
        (outcome, msgs)
    }

    #[tokio::test]
    async fn hello_turn_chain() {
        let clock = SimClock::new();
        let s = session(&clock);
        let o = orchestrator(mocks());
        let (outcome, msgs) = turn(&o, &s, &clock, UtteranceInput::Text("hello".into())).await;
        assert_eq!(outcome, TurnOutcome::Completed { emotion: EmotionLabel::Neutral, duration_ms: 60 });
        assert_eq!(msgs[0], ServerMessage::UserTranscript { text: "hello".into() });
        assert_eq!(msgs[1], ServerMessage::AgentReplyStart { emotion: EmotionLabel::Neutral, duration_ms: 60 });
        let frames: usize = msgs
            .iter()
            .filter_map(|m| match m {
                ServerMessage::AgentAnimationChunk { frames, .. } => Some(frames.len()),
                _ => None,
            })
            .sum();
        assert_eq!(frames, 2);
        assert!(msgs.iter().any(|m| matches!(m, ServerMessage::AgentAudioChunk(_))));
        assert_eq!(msgs.last(), Some(&ServerMessage::AgentReplyEnd));
        assert_eq!(lock(&s).transcript().len(), 2);
    }

    #[tokio::test]
    async fn audio_input_is_transcribed() {
        let clock = SimClock::new();
        let s = session(&clock);
        let o = orchestrator(mocks());
        let audio = AudioUtterance {
            chunks: vec![AudioChunk { seq: 0, samples: vec![0; 320], sample_rate: STT_SAMPLE_RATE, is_final: true }],
            sidecar_text: Some("insult me".into()),
        };
        let (outcome, msgs) = turn(&o, &s, &clock, UtteranceInput::Audio(audio)).await;
        assert_eq!(outcome, TurnOutcome::Completed { emotion: EmotionLabel::Angry, duration_ms: 120 });
        assert_eq!(msgs[0], ServerMessage::UserTranscript { text: "insult me".into() });
    }

    #[tokio::test]
    async fn empty_transcription_aborts() {
        let clock = SimClock::new();
        let s = session(&clock);
        let o = orchestrator(mocks());
        let audio = AudioUtterance {
            chunks: vec![AudioChunk { seq: 0, samples: vec![], sample_rate: STT_SAMPLE_RATE, is_final: true }],
            sidecar_text: None,
        };
        let (outcome, msgs) = turn(&o, &s, &clock, UtteranceInput::Audio(audio)).await;
        assert_eq!(outcome, TurnOutcome::Aborted(ErrorCode::EmptyUtterance));
        assert!(matches!(msgs[..], [ServerMessage::Error { code: ErrorCode::EmptyUtterance, .. }]));
        assert!(!lock(&s).turn_in_flight());
    }

    #[tokio::test]
    async fn third_strike_closes_without_reply() {
        let clock = SimClock::new();
        let s = session(&clock);
        let o = orchestrator(mocks());
        for _ in 0..2 {
            let (outcome, _) = turn(&o, &s, &clock, UtteranceInput::Text("you are stupid".into())).await;
            assert!(matches!(outcome, TurnOutcome::Completed { .. }));
        }
        let (outcome, msgs) = turn(&o, &s, &clock, UtteranceInput::Text("you are stupid".into())).await;
        let TurnOutcome::Closed(closed) = outcome else { panic!("expected close") };
        assert_eq!(closed.reason, CloseReason::AbuseLimit);
        assert_eq!(closed.transcript.len(), 5);
        assert!(closed.transcript.turns()[4].moderation_flagged());
        assert_eq!(
            msgs,
            vec![
                ServerMessage::UserTranscript { text: "you are stupid".into() },
                ServerMessage::SessionClosed { reason: CloseReason::AbuseLimit }
            ]
        );
    }

    #[tokio::test]
    async fn provider_failure_keeps_session_open() {
        let clock = SimClock::new();
        let s = session(&clock);
        let mut p = mocks();
        p.llm = Arc::new(Unavailable);
        let o = orchestrator(p);
        let (outcome, msgs) = turn(&o, &s, &clock, UtteranceInput::Text("hi".into())).await;
        assert_eq!(outcome, TurnOutcome::Aborted(ErrorCode::ProviderUnavailable));
        assert!(matches!(msgs.last(), Some(ServerMessage::Error { code: ErrorCode::ProviderUnavailable, .. })));
        assert!(lock(&s).state().is_live());
        assert!(lock(&s).transcript().is_empty());
        // retry succeeds once the provider is back
        let o = orchestrator(mocks());
        let (outcome, _) = turn(&o, &s, &clock, UtteranceInput::Text("hi".into())).await;
        assert!(matches!(outcome, TurnOutcome::Completed { .. }));
    }

    #[tokio::test]
    async fn second_turn_while_in_flight() {
        let clock = SimClock::new();
        let s = session(&clock);
        let mut p = mocks();
        p.llm = Arc::new(Delayed::fixed(MockLlm::default(), Duration::from_millis(200)));
        let o = Arc::new(orchestrator(p));
        let (tx, _rx) = mpsc::unbounded_channel();
        let first = {
            let (o, s, clock, tx) = (o.clone(), s.clone(), clock.clone(), tx.clone());
            tokio::spawn(async move { o.run_turn(&s, &clock, UtteranceInput::Text("a".into()), &tx).await })
        };
        tokio::time::sleep(Duration::from_millis(50)).await;
        let second = o.run_turn(&s, &clock, UtteranceInput::Text("b".into()), &tx).await;
        assert_eq!(second, Err(TurnError::TurnInFlight));
        assert!(first.await.unwrap().is_ok());
    }

    #[tokio::test]
    async fn stt_timeout_aborts() {
        let clock = SimClock::new();
        let s = session(&clock);
        let mut p = mocks();
        p.stt = Arc::new(Delayed::fixed(MockStt, Duration::from_secs(5)));
        let o = Orchestrator::new(p, library(), ProviderBudgets::uniform(Duration::from_millis(50)), 0);
        let audio = AudioUtterance {
            chunks: vec![AudioChunk { seq: 0, samples: vec![], sample_rate: STT_SAMPLE_RATE, is_final: true }],
            sidecar_text: Some("x".into()),
        };
        let (outcome, _) = turn(&o, &s, &clock, UtteranceInput::Audio(audio)).await;
        assert_eq!(outcome, TurnOutcome::Aborted(ErrorCode::ProviderTimeout));
    }

    #[tokio::test]
    async fn turn_after_close_rejected() {
        let clock = SimClock::new();
        let s = session(&clock);
        close_shared(&s, CloseReason::UserEnded).unwrap();
        let (tx, _rx) = mpsc::unbounded_channel();
        let o = orchestrator(mocks());
        assert_eq!(o.run_turn(&s, &clock, UtteranceInput::Text("x".into()), &tx).await, Err(TurnError::NotActive));
    }

    #[test]
    fn interleave_orders_by_time() {
        let lib = library();
        let clip = select_clip(&lib, EmotionLabel::Happy, 0);
        let samples = vec![0i16; 2000 * 24];
        let synth = Synthesis {
            chunks: crate::providers::chunk_samples(&samples, 24_000, 2400),
            duration_ms: 2000,
        };
        let track = build_animation_track(clip, 2000);
        let msgs = interleave_reply(synth, &track);
        let mut last = -1.0f64;
        let mut audio_ms = 0.0;
        for m in &msgs {
            let t = match m {
                ServerMessage::AgentAudioChunk(c) => {
                    let t = audio_ms;
                    audio_ms += c.duration_ms();
                    t
                }
                ServerMessage::AgentAnimationChunk { first_frame_index, .. } => track.frame_time_ms(*first_frame_index),
                _ => unreachable!(),
            };
            assert!(t >= last);
            last = t;
        }
        assert_eq!(
            msgs.iter().filter(|m| matches!(m, ServerMessage::AgentAnimationChunk { .. })).count(),
            frames_for_duration(2000, 30).div_ceil(MAX_FRAMES_PER_CHUNK)
        );
    }
}
