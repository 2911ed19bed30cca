//! Conversation history, LLM request assembly and emotion-tagged reply parsing.
//!
//! Replies from the language model carry their emotional state in a header
//! line:
//!
//! ```text
//! EMOTION: Happy
//! Great to see you!
//! ```
//!
//! The header is matched case-insensitively. A missing header or an unknown
//! label degrades to [`EmotionLabel::Neutral`] with `parse_fallback` set.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The closed set of emotions an agent can express.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmotionLabel {
    Neutral,
    Happy,
    Sad,
    Angry,
    Surprised,
    Afraid,
    Disgusted,
}

impl EmotionLabel {
    /// All labels in canonical order.
    pub const ALL: [EmotionLabel; 7] = [
        EmotionLabel::Neutral,
        EmotionLabel::Happy,
        EmotionLabel::Sad,
        EmotionLabel::Angry,
        EmotionLabel::Surprised,
        EmotionLabel::Afraid,
        EmotionLabel::Disgusted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EmotionLabel::Neutral => "Neutral",
            EmotionLabel::Happy => "Happy",
            EmotionLabel::Sad => "Sad",
            EmotionLabel::Angry => "Angry",
            EmotionLabel::Surprised => "Surprised",
            EmotionLabel::Afraid => "Afraid",
            EmotionLabel::Disgusted => "Disgusted",
        }
    }

    /// English list of every label, e.g. `"Neutral, Happy, ..., and Disgusted"`.
    pub fn enumerate_all() -> String {
        let names: Vec<&str> = Self::ALL.iter().map(|e| e.as_str()).collect();
        let (last, head) = names.split_last().expect("label set is non-empty");
        format!("{}, and {}", head.join(", "), last)
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown emotion label {0:?}")]
pub struct UnknownEmotion(pub String);

impl FromStr for EmotionLabel {
    type Err = UnknownEmotion;

    /// Case-insensitive.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let needle = s.trim();
        Self::ALL
            .into_iter()
            .find(|e| e.as_str().eq_ignore_ascii_case(needle))
            .ok_or_else(|| UnknownEmotion(needle.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Agent,
}

/// One utterance in a conversation.
///
/// Agent turns always carry an emotion; user turns never do. Use
/// [`Turn::user`] and [`Turn::agent`] to construct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    speaker: Speaker,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    emotion: Option<EmotionLabel>,
    /// Session-relative milliseconds.
    started_at_ms: u64,
    #[serde(default)]
    moderation_flagged: bool,
}

impl Turn {
    pub fn user(text: impl Into<String>, started_at_ms: u64, moderation_flagged: bool) -> Self {
        Self {
            speaker: Speaker::User,
            text: text.into(),
            emotion: None,
            started_at_ms,
            moderation_flagged,
        }
    }

    pub fn agent(text: impl Into<String>, emotion: EmotionLabel, started_at_ms: u64) -> Self {
        Self {
            speaker: Speaker::Agent,
            text: text.into(),
            emotion: Some(emotion),
            started_at_ms,
            moderation_flagged: false,
        }
    }

    pub fn speaker(&self) -> Speaker {
        self.speaker
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn emotion(&self) -> Option<EmotionLabel> {
        self.emotion
    }

    pub fn started_at_ms(&self) -> u64 {
        self.started_at_ms
    }

    pub fn moderation_flagged(&self) -> bool {
        self.moderation_flagged
    }

    fn well_formed(&self) -> bool {
        match self.speaker {
            Speaker::User => self.emotion.is_none(),
            Speaker::Agent => self.emotion.is_some() && !self.moderation_flagged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DialogueError {
    #[error("user utterance is empty")]
    EmptyUtterance,
    #[error("reply text is empty after removing the emotion header")]
    EmptyReplyText,
    #[error("turn by {0:?} would follow another turn by the same speaker")]
    AlternationViolation(Speaker),
    #[error("turn starts at {got} ms, before the previous turn at {previous} ms")]
    TimestampRegression { previous: u64, got: u64 },
    #[error("malformed turn: agent turns need an emotion, user turns must not have one")]
    MalformedTurn,
}

/// Ordered, half-duplex conversation history.
///
/// Values are immutable: [`Transcript::append_turn`] returns a new transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    session_id: String,
    turns: Vec<Turn>,
}

impl Transcript {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            turns: Vec::new(),
        }
    }

    /// Builds a transcript by appending `turns` in order, validating each.
    pub fn from_turns(
        session_id: impl Into<String>,
        turns: impl IntoIterator<Item = Turn>,
    ) -> Result<Self, DialogueError> {
        turns
            .into_iter()
            .try_fold(Self::new(session_id), |t, turn| t.append_turn(turn))
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn user_turn_count(&self) -> usize {
        self.turns
            .iter()
            .filter(|t| t.speaker == Speaker::User)
            .count()
    }

    pub fn last(&self) -> Option<&Turn> {
        self.turns.last()
    }

    /// Returns a new transcript with `turn` appended. `self` is left untouched.
    pub fn append_turn(&self, turn: Turn) -> Result<Transcript, DialogueError> {
        if !turn.well_formed() {
            return Err(DialogueError::MalformedTurn);
        }
        if let Some(prev) = self.turns.last() {
            if prev.speaker == turn.speaker {
                return Err(DialogueError::AlternationViolation(turn.speaker));
            }
            if turn.started_at_ms < prev.started_at_ms {
                return Err(DialogueError::TimestampRegression {
                    previous: prev.started_at_ms,
                    got: turn.started_at_ms,
                });
            }
        }
        let mut turns = Vec::with_capacity(self.turns.len() + 1);
        turns.extend_from_slice(&self.turns);
        turns.push(turn);
        Ok(Transcript {
            session_id: self.session_id.clone(),
            turns,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// What an LLM request is for. Real adapters ignore it; mocks use it to pick
/// a scripted behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestPurpose {
    #[default]
    Dialogue,
    Feedback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub system: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub purpose: RequestPurpose,
}

impl LlmRequest {
    /// Content of the final user message, if any.
    pub fn last_user_message(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    /// Every piece of text the provider would see, in order.
    pub fn all_text(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.system.as_str()).chain(self.messages.iter().map(|m| m.content.as_str()))
    }
}

/// Builds the request for the next agent reply: every prior turn in order,
/// then the new user utterance.
pub fn build_llm_request(
    system_prompt: &str,
    transcript: &Transcript,
    user_utterance: &str,
) -> Result<LlmRequest, DialogueError> {
    if user_utterance.trim().is_empty() {
        return Err(DialogueError::EmptyUtterance);
    }
    let messages = transcript
        .turns()
        .iter()
        .map(|t| ChatMessage {
            role: match t.speaker {
                Speaker::User => Role::User,
                Speaker::Agent => Role::Assistant,
            },
            content: t.text.clone(),
        })
        .chain(std::iter::once(ChatMessage {
            role: Role::User,
            content: user_utterance.to_string(),
        }))
        .collect();
    Ok(LlmRequest {
        system: system_prompt.to_string(),
        messages,
        purpose: RequestPurpose::Dialogue,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentReply {
    pub emotion: EmotionLabel,
    pub text: String,
    /// Set when the header was missing or named an unknown label.
    pub parse_fallback: bool,
}

const HEADER_KEY: &str = "emotion";

/// Returns the label text if `line` looks like `EMOTION: <label>`.
fn header_label(line: &str) -> Option<&str> {
    let line = line.trim();
    let (key, rest) = line.split_once(':')?;
    key.trim()
        .eq_ignore_ascii_case(HEADER_KEY)
        .then(|| rest.trim())
}

/// Splits a raw model reply into its emotion and spoken text.
///
/// Only the first non-blank line is considered as a header.
pub fn parse_emotion_tagged_reply(raw: &str) -> Result<AgentReply, DialogueError> {
    let mut offset = 0usize;
    let mut header = None;
    for line in raw.split_inclusive('\n') {
        offset += line.len();
        if !line.trim().is_empty() {
            header = header_label(line).map(|label| (label, offset));
            break;
        }
    }

    let (emotion, parse_fallback, body) = match header {
        Some((label, body_start)) => {
            let body = &raw[body_start..];
            match label.parse::<EmotionLabel>() {
                Ok(e) => (e, false, body),
                Err(_) => (EmotionLabel::Neutral, true, body),
            }
        }
        None => (EmotionLabel::Neutral, true, raw),
    };

    let text = body.trim();
    if text.is_empty() {
        return Err(DialogueError::EmptyReplyText);
    }
    Ok(AgentReply {
        emotion,
        text: text.to_string(),
        parse_fallback,
    })
}
