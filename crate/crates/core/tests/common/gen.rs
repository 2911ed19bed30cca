//! proptest strategies for wire messages.

use facetalk_core::feedback::{Evidence, FeedbackReport};
use facetalk_core::protocol::{ErrorCode, PersonaSource};
use facetalk_core::providers::{AudioChunk, STT_SAMPLE_RATE, TTS_SAMPLE_RATE};
use facetalk_core::{ClientMessage, CloseReason, EmotionLabel, PersonaSpec, ServerMessage};
use proptest::collection::{btree_map, vec};
use proptest::prelude::*;

pub const ERROR_CODES: [ErrorCode; 17] = [
    ErrorCode::ProtocolViolation,
    ErrorCode::DecodeError,
    ErrorCode::InvalidPersona,
    ErrorCode::UnknownPersona,
    ErrorCode::TurnInFlight,
    ErrorCode::EmptyUtterance,
    ErrorCode::EmptyReply,
    ErrorCode::ProviderUnavailable,
    ErrorCode::ProviderTimeout,
    ErrorCode::ProviderInvalidResponse,
    ErrorCode::StreamCorrupt,
    ErrorCode::SessionClosed,
    ErrorCode::SessionNotClosed,
    ErrorCode::EmptyTranscript,
    ErrorCode::FeedbackFailed,
    ErrorCode::FeedbackUnavailable,
    ErrorCode::Internal,
];

pub fn emotion() -> impl Strategy<Value = EmotionLabel> {
    proptest::sample::select(EmotionLabel::ALL.to_vec())
}

fn text() -> impl Strategy<Value = String> {
    "\\PC{0,40}"
}

pub fn audio_chunk(sample_rate: u32) -> impl Strategy<Value = AudioChunk> {
    (any::<u32>(), vec(any::<i16>(), 0..64), any::<bool>()).prop_map(move |(seq, samples, is_final)| AudioChunk {
        seq,
        samples,
        sample_rate,
        is_final,
    })
}

pub fn persona_spec() -> impl Strategy<Value = PersonaSpec> {
    (
        text(),
        vec(text(), 0..4),
        text(),
        text(),
        btree_map(text(), text(), 0..3),
        "[a-z]{2}-[A-Z]{2}",
        text(),
        text(),
    )
        .prop_map(|(agent_name, personality_traits, background, premise, user_info, language, avatar_id, voice_id)| {
            PersonaSpec { agent_name, personality_traits, background, premise, user_info, language, avatar_id, voice_id }
        })
}

pub fn client_message() -> impl Strategy<Value = ClientMessage> {
    prop_oneof![
        (persona_spec(), text()).prop_map(|(p, goal)| ClientMessage::Hello { persona: PersonaSource::Persona(p), goal }),
        (text(), text()).prop_map(|(id, goal)| ClientMessage::Hello { persona: PersonaSource::PersonaId(id), goal }),
        text().prop_map(|text| ClientMessage::UtteranceText { text }),
        audio_chunk(STT_SAMPLE_RATE).prop_map(ClientMessage::UtteranceAudioChunk),
        proptest::option::of(text()).prop_map(|sidecar_text| ClientMessage::UtteranceEnd { sidecar_text }),
        Just(ClientMessage::EndCall),
        Just(ClientMessage::RequestFeedback),
    ]
}

fn evidence() -> impl Strategy<Value = Evidence> {
    (text(), 0usize..500, text()).prop_map(|(claim, turn_index, quote)| Evidence { claim, turn_index, quote })
}

fn frames() -> impl Strategy<Value = Vec<Vec<f32>>> {
    vec(vec(0.0f32..=1.0, 0..8), 0..30)
}

pub fn server_message() -> impl Strategy<Value = ServerMessage> {
    prop_oneof![
        (text(), vec(text(), 0..5), 1u32..120)
            .prop_map(|(session_id, channels, fps)| ServerMessage::SessionReady { session_id, channels, fps }),
        text().prop_map(|text| ServerMessage::UserTranscript { text }),
        (emotion(), any::<u64>()).prop_map(|(emotion, duration_ms)| ServerMessage::AgentReplyStart { emotion, duration_ms }),
        audio_chunk(TTS_SAMPLE_RATE).prop_map(ServerMessage::AgentAudioChunk),
        (0usize..100_000, frames())
            .prop_map(|(first_frame_index, frames)| ServerMessage::AgentAnimationChunk { first_frame_index, frames }),
        Just(ServerMessage::AgentReplyEnd),
        any::<u64>().prop_map(|remaining_ms| ServerMessage::TimeWarning { remaining_ms }),
        proptest::sample::select(CloseReason::ALL.to_vec()).prop_map(|reason| ServerMessage::SessionClosed { reason }),
        (text(), vec(evidence(), 0..3), vec(evidence(), 0..3), vec(text(), 0..3)).prop_map(
            |(goal, strengths, weaknesses, actions)| ServerMessage::FeedbackReport {
                report: FeedbackReport { goal, strengths, weaknesses, actions }
            }
        ),
        (proptest::sample::select(ERROR_CODES.to_vec()), text())
            .prop_map(|(code, message)| ServerMessage::Error { code, message }),
    ]
}
