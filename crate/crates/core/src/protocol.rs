//! Browser wire protocol.
//!
//! Control messages travel as UTF-8 JSON text frames with a `"type"`
//! discriminator. Audio travels as binary frames:
//!
//! ```text
//! offset  size  field
//! 0       1     type tag (0x01 user audio, 0x02 agent audio)
//! 1       4     seq, big-endian u32
//! 5       1     final flag (0 or 1)
//! 6       2n    n PCM16 samples, little-endian
//! ```
//!
//! User audio is 16 kHz and agent audio 24 kHz; the rate is implied by the
//! tag.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::EmotionLabel;
use crate::expression::BlendshapeFrame;
use crate::feedback::FeedbackReport;
use crate::persona::PersonaSpec;
use crate::providers::{AudioChunk, STT_SAMPLE_RATE, TTS_SAMPLE_RATE};
use crate::session::CloseReason;

pub const TAG_USER_AUDIO: u8 = 0x01;
pub const TAG_AGENT_AUDIO: u8 = 0x02;
pub const AUDIO_HEADER_LEN: usize = 6;
/// Animation frames per `AgentAnimationChunk` message.
pub const MAX_FRAMES_PER_CHUNK: usize = 30;

/// Either an inline persona or the id of a server-side preset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonaSource {
    Persona(PersonaSpec),
    PersonaId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello {
        #[serde(flatten)]
        persona: PersonaSource,
        #[serde(default)]
        goal: String,
    },
    UtteranceText {
        text: String,
    },
    UtteranceAudioChunk(AudioChunk),
    UtteranceEnd {
        /// Transcript hint consumed only by the mock recognizer.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sidecar_text: Option<String>,
    },
    EndCall,
    RequestFeedback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    ProtocolViolation,
    DecodeError,
    InvalidPersona,
    UnknownPersona,
    TurnInFlight,
    EmptyUtterance,
    EmptyReply,
    ProviderUnavailable,
    ProviderTimeout,
    ProviderInvalidResponse,
    StreamCorrupt,
    SessionClosed,
    SessionNotClosed,
    EmptyTranscript,
    FeedbackFailed,
    FeedbackUnavailable,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    SessionReady {
        session_id: String,
        channels: Vec<String>,
        fps: u32,
    },
    UserTranscript {
        text: String,
    },
    AgentReplyStart {
        emotion: EmotionLabel,
        duration_ms: u64,
    },
    AgentAudioChunk(AudioChunk),
    AgentAnimationChunk {
        first_frame_index: usize,
        frames: Vec<BlendshapeFrame>,
    },
    AgentReplyEnd,
    TimeWarning {
        remaining_ms: u64,
    },
    SessionClosed {
        reason: CloseReason,
    },
    FeedbackReport {
        report: FeedbackReport,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error { code, message: message.into() }
    }

    /// Short name of the variant, matching its `"type"` value.
    pub fn kind(&self) -> &'static str {
        match self {
            ServerMessage::SessionReady { .. } => "session_ready",
            ServerMessage::UserTranscript { .. } => "user_transcript",
            ServerMessage::AgentReplyStart { .. } => "agent_reply_start",
            ServerMessage::AgentAudioChunk(_) => "agent_audio_chunk",
            ServerMessage::AgentAnimationChunk { .. } => "agent_animation_chunk",
            ServerMessage::AgentReplyEnd => "agent_reply_end",
            ServerMessage::TimeWarning { .. } => "time_warning",
            ServerMessage::SessionClosed { .. } => "session_closed",
            ServerMessage::FeedbackReport { .. } => "feedback_report",
            ServerMessage::Error { .. } => "error",
        }
    }
}

/// One transport frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireFrame {
    Text(String),
    Binary(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("decode error at byte {offset}: {reason}")]
pub struct DecodeError {
    pub offset: usize,
    pub reason: String,
}

impl DecodeError {
    fn new(offset: usize, reason: impl Into<String>) -> Self {
        Self { offset, reason: reason.into() }
    }

    fn from_json(text: &str, e: serde_json::Error) -> Self {
        // serde_json reports 1-based line/column; convert to a byte offset
        let line_start: usize = text
            .split_inclusive('\n')
            .take(e.line().saturating_sub(1))
            .map(str::len)
            .sum();
        let offset = (line_start + e.column().saturating_sub(1)).min(text.len());
        Self::new(offset, e.to_string())
    }
}

/// Encodes an audio chunk into the binary frame layout.
pub fn encode_audio_frame(tag: u8, chunk: &AudioChunk) -> Vec<u8> {
    let mut out = Vec::with_capacity(AUDIO_HEADER_LEN + chunk.samples.len() * 2);
    out.push(tag);
    out.extend_from_slice(&chunk.seq.to_be_bytes());
    out.push(u8::from(chunk.is_final));
    for s in &chunk.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Decodes a binary audio frame, returning its tag and chunk.
pub fn decode_audio_frame(bytes: &[u8]) -> Result<(u8, AudioChunk), DecodeError> {
    if bytes.len() < AUDIO_HEADER_LEN {
        return Err(DecodeError::new(bytes.len(), format!("truncated header: {} of {AUDIO_HEADER_LEN} bytes", bytes.len())));
    }
    let tag = bytes[0];
    let sample_rate = match tag {
        TAG_USER_AUDIO => STT_SAMPLE_RATE,
        TAG_AGENT_AUDIO => TTS_SAMPLE_RATE,
        other => return Err(DecodeError::new(0, format!("unknown type tag {other:#04x}"))),
    };
    let seq = u32::from_be_bytes([bytes[1], bytes[2], bytes[3], bytes[4]]);
    let is_final = match bytes[5] {
        0 => false,
        1 => true,
        other => return Err(DecodeError::new(5, format!("final flag must be 0 or 1, got {other}"))),
    };
    let payload = &bytes[AUDIO_HEADER_LEN..];
    if !payload.len().is_multiple_of(2) {
        return Err(DecodeError::new(bytes.len() - 1, "odd number of PCM16 payload bytes"));
    }
    let samples = payload
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect();
    Ok((tag, AudioChunk { seq, samples, sample_rate, is_final }))
}

/// Messages that can cross the wire.
pub trait WireMessage: Sized {
    fn encode(&self) -> WireFrame;
    fn decode(frame: &WireFrame) -> Result<Self, DecodeError>;
}

fn decode_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, DecodeError> {
    serde_json::from_str(text).map_err(|e| DecodeError::from_json(text, e))
}

impl WireMessage for ClientMessage {
    fn encode(&self) -> WireFrame {
        match self {
            ClientMessage::UtteranceAudioChunk(c) => WireFrame::Binary(encode_audio_frame(TAG_USER_AUDIO, c)),
            other => WireFrame::Text(serde_json::to_string(other).expect("client message serializes")),
        }
    }

    fn decode(frame: &WireFrame) -> Result<Self, DecodeError> {
        match frame {
            WireFrame::Binary(b) => match decode_audio_frame(b)? {
                (TAG_USER_AUDIO, chunk) => Ok(ClientMessage::UtteranceAudioChunk(chunk)),
                (tag, _) => Err(DecodeError::new(0, format!("tag {tag:#04x} is not a client message"))),
            },
            WireFrame::Text(t) => match decode_json(t)? {
                ClientMessage::UtteranceAudioChunk(_) => Err(DecodeError::new(0, "audio chunks must be sent as binary frames")),
                msg => Ok(msg),
            },
        }
    }
}

impl WireMessage for ServerMessage {
    fn encode(&self) -> WireFrame {
        match self {
            ServerMessage::AgentAudioChunk(c) => WireFrame::Binary(encode_audio_frame(TAG_AGENT_AUDIO, c)),
            other => WireFrame::Text(serde_json::to_string(other).expect("server message serializes")),
        }
    }

    fn decode(frame: &WireFrame) -> Result<Self, DecodeError> {
        match frame {
            WireFrame::Binary(b) => match decode_audio_frame(b)? {
                (TAG_AGENT_AUDIO, chunk) => Ok(ServerMessage::AgentAudioChunk(chunk)),
                (tag, _) => Err(DecodeError::new(0, format!("tag {tag:#04x} is not a server message"))),
            },
            WireFrame::Text(t) => match decode_json(t)? {
                ServerMessage::AgentAudioChunk(_) => Err(DecodeError::new(0, "audio chunks must be sent as binary frames")),
                msg => Ok(msg),
            },
        }
    }
}

pub fn encode_message<M: WireMessage>(msg: &M) -> WireFrame {
    msg.encode()
}

pub fn decode_message<M: WireMessage>(frame: &WireFrame) -> Result<M, DecodeError> {
    M::decode(frame)
}
