//! Speech, language and moderation providers.
//!
//! Each capability is a trait object so mocks and real-service adapters are
//! interchangeable. Callers go through the free functions in this module
//! ([`transcribe`], [`complete`], [`synthesize`], [`moderate`]), which check
//! the contract on both sides of the call and enforce the time budget.

pub mod http;
pub mod mock;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{EmotionLabel, LlmRequest};

/// Sample rate of user audio sent for transcription.
pub const STT_SAMPLE_RATE: u32 = 16_000;
/// Sample rate of synthesized agent audio.
pub const TTS_SAMPLE_RATE: u32 = 24_000;

/// A slice of PCM16 mono audio.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioChunk {
    pub seq: u32,
    pub samples: Vec<i16>,
    pub sample_rate: u32,
    #[serde(rename = "final")]
    pub is_final: bool,
}

impl AudioChunk {
    /// Duration in milliseconds, possibly fractional.
    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate as f64
    }
}

/// A complete user utterance as received from the client.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AudioUtterance {
    pub chunks: Vec<AudioChunk>,
    /// Out-of-band text the client attached; only the mock recognizer reads it.
    pub sidecar_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisRequest {
    pub text: String,
    pub emotion: EmotionLabel,
    pub voice_id: String,
    pub language: String,
}

impl SynthesisRequest {
    pub fn new(
        text: impl Into<String>,
        emotion: EmotionLabel,
        voice_id: impl Into<String>,
        language: impl Into<String>,
    ) -> Result<Self, ProviderError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ProviderError::InvalidRequest("synthesis text is empty".into()));
        }
        Ok(Self {
            text,
            emotion,
            voice_id: voice_id.into(),
            language: language.into(),
        })
    }
}

/// Synthesized reply audio.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Synthesis {
    pub chunks: Vec<AudioChunk>,
    pub duration_ms: u64,
}

impl Synthesis {
    pub fn total_samples(&self) -> usize {
        self.chunks.iter().map(|c| c.samples.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Stt,
    Llm,
    Tts,
    Moderation,
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProviderKind::Stt => "stt",
            ProviderKind::Llm => "llm",
            ProviderKind::Tts => "tts",
            ProviderKind::Moderation => "moderation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("{provider} provider unavailable: {reason}")]
    Unavailable { provider: ProviderKind, reason: String },
    #[error("{provider} provider exceeded its {budget:?} budget")]
    Timeout { provider: ProviderKind, budget: Duration },
    #[error("audio stream corrupt at seq {seq}: {reason}")]
    StreamCorrupt { seq: u32, reason: &'static str },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("{provider} provider returned an invalid response: {reason}")]
    InvalidResponse { provider: ProviderKind, reason: String },
}

impl ProviderError {
    pub fn unavailable(provider: ProviderKind, reason: impl Into<String>) -> Self {
        ProviderError::Unavailable { provider, reason: reason.into() }
    }
}

#[async_trait]
pub trait SttProvider: Send + Sync {
    async fn transcribe(&self, audio: &AudioUtterance, language: &str) -> Result<String, ProviderError>;
}

#[async_trait]
pub trait LlmProvider: Send + Sync {
    async fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError>;
}

#[async_trait]
pub trait TtsProvider: Send + Sync {
    async fn synthesize(&self, request: &SynthesisRequest) -> Result<Synthesis, ProviderError>;
}

#[async_trait]
pub trait ModerationProvider: Send + Sync {
    /// Offensiveness score in `[0, 1]`.
    async fn score(&self, utterance: &str) -> Result<f64, ProviderError>;
}

/// Per-call time budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderBudgets {
    #[serde(with = "millis")]
    pub stt: Duration,
    #[serde(with = "millis")]
    pub llm: Duration,
    #[serde(with = "millis")]
    pub tts: Duration,
    #[serde(with = "millis")]
    pub moderation: Duration,
}

impl Default for ProviderBudgets {
    fn default() -> Self {
        let ten = Duration::from_secs(10);
        Self { stt: ten, llm: ten, tts: ten, moderation: ten }
    }
}

impl ProviderBudgets {
    pub fn uniform(budget: Duration) -> Self {
        Self { stt: budget, llm: budget, tts: budget, moderation: budget }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

/// The four providers a session needs.
#[derive(Clone)]
pub struct Providers {
    pub stt: Arc<dyn SttProvider>,
    pub llm: Arc<dyn LlmProvider>,
    pub tts: Arc<dyn TtsProvider>,
    pub moderation: Arc<dyn ModerationProvider>,
}

impl fmt::Debug for Providers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Providers").finish_non_exhaustive()
    }
}

async fn with_budget<T>(
    provider: ProviderKind,
    budget: Duration,
    fut: impl std::future::Future<Output = Result<T, ProviderError>>,
) -> Result<T, ProviderError> {
    match tokio::time::timeout(budget, fut).await {
        Ok(r) => r,
        Err(_) => Err(ProviderError::Timeout { provider, budget }),
    }
}

/// Checks that seq numbers run 0, 1, 2, ... and that only the last chunk
/// is final.
pub fn validate_audio_stream(chunks: &[AudioChunk]) -> Result<(), ProviderError> {
    let Some(last) = chunks.last() else {
        return Err(ProviderError::StreamCorrupt { seq: 0, reason: "stream has no final chunk" });
    };
    for (i, c) in chunks.iter().enumerate() {
        if c.seq as usize != i {
            let reason = if (c.seq as usize) < i { "seq not increasing" } else { "seq gap" };
            return Err(ProviderError::StreamCorrupt { seq: c.seq, reason });
        }
        if c.is_final && i + 1 != chunks.len() {
            return Err(ProviderError::StreamCorrupt { seq: c.seq, reason: "chunk after final" });
        }
    }
    if !last.is_final {
        return Err(ProviderError::StreamCorrupt { seq: last.seq, reason: "stream has no final chunk" });
    }
    Ok(())
}

/// Speech to text. Empty audio yields an empty string.
pub async fn transcribe(
    provider: &dyn SttProvider,
    audio: &AudioUtterance,
    language: &str,
    budget: Duration,
) -> Result<String, ProviderError> {
    validate_audio_stream(&audio.chunks)?;
    if let Some(c) = audio.chunks.iter().find(|c| c.sample_rate != STT_SAMPLE_RATE) {
        return Err(ProviderError::StreamCorrupt { seq: c.seq, reason: "unexpected sample rate" });
    }
    with_budget(ProviderKind::Stt, budget, provider.transcribe(audio, language)).await
}

/// Raw LLM completion. Never returns empty text.
pub async fn complete(
    provider: &dyn LlmProvider,
    request: &LlmRequest,
    budget: Duration,
) -> Result<String, ProviderError> {
    if request.messages.is_empty() {
        return Err(ProviderError::InvalidRequest("request has no messages".into()));
    }
    let text = with_budget(ProviderKind::Llm, budget, provider.complete(request)).await?;
    if text.trim().is_empty() {
        return Err(ProviderError::InvalidResponse {
            provider: ProviderKind::Llm,
            reason: "empty completion".into(),
        });
    }
    Ok(text)
}

/// Text to speech. The result is checked for a positive duration, a valid
/// chunk stream, and a sample count matching the duration within one sample.
pub async fn synthesize(
    provider: &dyn TtsProvider,
    request: &SynthesisRequest,
    budget: Duration,
) -> Result<Synthesis, ProviderError> {
    if request.text.trim().is_empty() {
        return Err(ProviderError::InvalidRequest("synthesis text is empty".into()));
    }
    let out = with_budget(ProviderKind::Tts, budget, provider.synthesize(request)).await?;
    let invalid = |reason: String| ProviderError::InvalidResponse { provider: ProviderKind::Tts, reason };
    if out.duration_ms == 0 {
        return Err(invalid("zero duration".into()));
    }
    validate_audio_stream(&out.chunks)
        .map_err(|e| invalid(format!("bad chunk stream: {e}")))?;
    if out.chunks.iter().any(|c| c.sample_rate != TTS_SAMPLE_RATE) {
        return Err(invalid("unexpected sample rate".into()));
    }
    let expected = out.duration_ms as i64 * TTS_SAMPLE_RATE as i64 / 1000;
    let got = out.total_samples() as i64;
    if (got - expected).abs() > 1 {
        return Err(invalid(format!("{got} samples for {} ms", out.duration_ms)));
    }
    Ok(out)
}

/// Moderation score for one utterance.
pub async fn moderate(
    provider: &dyn ModerationProvider,
    utterance: &str,
    budget: Duration,
) -> Result<f64, ProviderError> {
    if utterance.trim().is_empty() {
        return Err(ProviderError::InvalidRequest("utterance is empty".into()));
    }
    let score = with_budget(ProviderKind::Moderation, budget, provider.score(utterance)).await?;
    if !(0.0..=1.0).contains(&score) {
        return Err(ProviderError::InvalidResponse {
            provider: ProviderKind::Moderation,
            reason: format!("score {score} outside [0, 1]"),
        });
    }
    Ok(score)
}

/// Splits `samples` into sequenced chunks of at most `chunk_len` samples.
/// Always yields at least one (final) chunk.
pub fn chunk_samples(samples: &[i16], sample_rate: u32, chunk_len: usize) -> Vec<AudioChunk> {
    let chunk_len = chunk_len.max(1);
    let mut chunks: Vec<AudioChunk> = samples
        .chunks(chunk_len)
        .enumerate()
        .map(|(i, s)| AudioChunk {
            seq: i as u32,
            samples: s.to_vec(),
            sample_rate,
            is_final: false,
        })
        .collect();
    if chunks.is_empty() {
        chunks.push(AudioChunk { seq: 0, samples: Vec::new(), sample_rate, is_final: false });
    }
    if let Some(last) = chunks.last_mut() {
        last.is_final = true;
    }
    chunks
}
