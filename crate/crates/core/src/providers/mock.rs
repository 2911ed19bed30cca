//! Deterministic in-process providers for tests, replays and demos.
//!
//! Every mock is a pure function of its request and static configuration.
//! [`Delayed`] adds latency without changing outputs.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    chunk_samples, AudioUtterance, LlmProvider, ModerationProvider, ProviderError, ProviderKind,
    SttProvider, Synthesis, SynthesisRequest, TtsProvider, TTS_SAMPLE_RATE,
};
use crate::dialogue::{LlmRequest, RequestPurpose};
use crate::feedback::numbered_user_turns;

/// Returns the client-attached sidecar text, or `""` for unlabeled audio.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockStt;

#[async_trait]
impl SttProvider for MockStt {
    async fn transcribe(&self, audio: &AudioUtterance, _language: &str) -> Result<String, ProviderError> {
        Ok(audio.sidecar_text.clone().unwrap_or_default())
    }
}

fn cue_key(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Scripted language model.
///
/// Dialogue requests are answered from a cue table keyed by the last user
/// utterance (trimmed, case-insensitive), defaulting to a neutral echo.
/// Feedback requests get a fixed report citing the first and last user turns.
#[derive(Debug, Clone, Default)]
pub struct MockLlm {
    cues: HashMap<String, String>,
}

impl MockLlm {
    pub fn with_cues<K: AsRef<str>, V: Into<String>>(cues: impl IntoIterator<Item = (K, V)>) -> Self {
        Self {
            cues: cues.into_iter().map(|(k, v)| (cue_key(k.as_ref()), v.into())).collect(),
        }
    }

    /// Loads a JSON object mapping utterances to raw replies.
    pub fn from_json_file(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let cues: HashMap<String, String> =
            serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Self::with_cues(cues))
    }

    pub fn reply_for(&self, request: &LlmRequest) -> String {
        match request.purpose {
            RequestPurpose::Feedback => Self::feedback_reply(request),
            RequestPurpose::Dialogue => {
                let last = request.last_user_message().unwrap_or_default();
                self.cues
                    .get(&cue_key(last))
                    .cloned()
                    .unwrap_or_else(|| format!("EMOTION: Neutral\n{last}"))
            }
        }
    }

    fn feedback_reply(request: &LlmRequest) -> String {
        let turns: Vec<usize> = request.all_text().flat_map(numbered_user_turns).collect();
        let (Some(first), Some(last)) = (turns.first(), turns.last()) else {
            return "There were no user turns to analyze.".into();
        };
        format!(
            "STRENGTH {first}: You opened with a clear, direct statement.\n\
             WEAKNESS {last}: This reply could have included a concrete example.\n\
             ACTION: Prepare one specific example that supports your goal.\n\
             ACTION: Close each answer with a question to keep the exchange balanced.\n"
        )
    }
}

#[async_trait]
impl LlmProvider for MockLlm {
    async fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError> {
        Ok(self.reply_for(request))
    }
}

/// Returns pre-scripted replies in order, then reports itself unavailable.
#[derive(Debug, Default)]
pub struct ScriptedLlm {
    replies: Mutex<VecDeque<String>>,
}

impl ScriptedLlm {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self { replies: Mutex::new(replies.into_iter().map(Into::into).collect()) }
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().unwrap().len()
    }
}

#[async_trait]
impl LlmProvider for ScriptedLlm {
    async fn complete(&self, _request: &LlmRequest) -> Result<String, ProviderError> {
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| ProviderError::unavailable(ProviderKind::Llm, "script exhausted"))
    }
}

/// Wraps an LLM and keeps every request it sees.
#[derive(Debug, Clone)]
pub struct RecordingLlm<P> {
    inner: P,
    log: Arc<Mutex<Vec<LlmRequest>>>,
}

impl<P> RecordingLlm<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, log: Arc::default() }
    }

    pub fn requests(&self) -> Vec<LlmRequest> {
        self.log.lock().unwrap().clone()
    }

    pub fn clear(&self) {
        self.log.lock().unwrap().clear();
    }
}

#[async_trait]
impl<P: LlmProvider> LlmProvider for RecordingLlm<P> {
    async fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError> {
        self.log.lock().unwrap().push(request.clone());
        self.inner.complete(request).await
    }
}

/// Silence at a fixed per-word rate.
#[derive(Debug, Clone, Copy)]
pub struct MockTts {
    pub ms_per_word: u64,
    /// Samples per emitted chunk.
    pub chunk_samples: usize,
}

impl Default for MockTts {
    fn default() -> Self {
        Self {
            ms_per_word: 60,
            chunk_samples: (TTS_SAMPLE_RATE / 10) as usize,
        }
    }
}

impl MockTts {
    pub fn duration_for(&self, text: &str) -> u64 {
        self.ms_per_word * text.split_whitespace().count() as u64
    }
}

#[async_trait]
impl TtsProvider for MockTts {
    async fn synthesize(&self, request: &SynthesisRequest) -> Result<Synthesis, ProviderError> {
        let duration_ms = self.duration_for(&request.text);
        let n = (duration_ms * TTS_SAMPLE_RATE as u64 / 1000) as usize;
        Ok(Synthesis {
            chunks: chunk_samples(&vec![0i16; n], TTS_SAMPLE_RATE, self.chunk_samples),
            duration_ms,
        })
    }
}

/// Scores 1.0 when the utterance contains a blocklisted term as whole
/// words, 0.0 otherwise. Case-insensitive.
#[derive(Debug, Clone, Default)]
pub struct MockModeration {
    terms: Vec<String>,
}

fn normalize_words(s: &str) -> String {
    let words: Vec<String> = s
        .split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    format!(" {} ", words.join(" "))
}

impl MockModeration {
    pub fn new<S: AsRef<str>>(blocklist: impl IntoIterator<Item = S>) -> Self {
        Self {
            terms: blocklist
                .into_iter()
                .map(|t| normalize_words(t.as_ref()))
                .filter(|t| !t.trim().is_empty())
                .collect(),
        }
    }

    /// Loads a JSON array of blocked terms.
    pub fn from_json_file(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let terms: Vec<String> = serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Self::new(terms))
    }

    pub fn score_text(&self, utterance: &str) -> f64 {
        let hay = normalize_words(utterance);
        if self.terms.iter().any(|t| hay.contains(t.as_str())) {
            1.0
        } else {
            0.0
        }
    }
}

#[async_trait]
impl ModerationProvider for MockModeration {
    async fn score(&self, utterance: &str) -> Result<f64, ProviderError> {
        Ok(self.score_text(utterance))
    }
}

/// Every call fails with `Unavailable`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Unavailable;

#[async_trait]
impl SttProvider for Unavailable {
    async fn transcribe(&self, _: &AudioUtterance, _: &str) -> Result<String, ProviderError> {
        Err(ProviderError::unavailable(ProviderKind::Stt, "offline"))
    }
}

#[async_trait]
impl LlmProvider for Unavailable {
    async fn complete(&self, _: &LlmRequest) -> Result<String, ProviderError> {
        Err(ProviderError::unavailable(ProviderKind::Llm, "offline"))
    }
}

#[async_trait]
impl TtsProvider for Unavailable {
    async fn synthesize(&self, _: &SynthesisRequest) -> Result<Synthesis, ProviderError> {
        Err(ProviderError::unavailable(ProviderKind::Tts, "offline"))
    }
}

#[async_trait]
impl ModerationProvider for Unavailable {
    async fn score(&self, _: &str) -> Result<f64, ProviderError> {
        Err(ProviderError::unavailable(ProviderKind::Moderation, "offline"))
    }
}

#[derive(Debug)]
enum Latency {
    Fixed(Duration),
    Uniform { min: Duration, max: Duration, rng: Mutex<ChaCha8Rng> },
}

/// Adds latency in front of any provider.
#[derive(Debug)]
pub struct Delayed<P> {
    inner: P,
    latency: Latency,
}

impl<P> Delayed<P> {
    pub fn fixed(inner: P, delay: Duration) -> Self {
        Self { inner, latency: Latency::Fixed(delay) }
    }

    /// Latency drawn uniformly from `[min, max]` by a seeded generator.
    pub fn uniform(inner: P, min: Duration, max: Duration, seed: u64) -> Self {
        Self {
            inner,
            latency: Latency::Uniform { min, max: max.max(min), rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)) },
        }
    }

    async fn wait(&self) {
        let d = match &self.latency {
            Latency::Fixed(d) => *d,
            Latency::Uniform { min, max, rng } => {
                let span = (*max - *min).as_micros() as u64;
                let jitter = rng.lock().unwrap().random_range(0..=span);
                *min + Duration::from_micros(jitter)
            }
        };
        if !d.is_zero() {
            tokio::time::sleep(d).await;
        }
    }
}

#[async_trait]
impl<P: SttProvider> SttProvider for Delayed<P> {
    async fn transcribe(&self, audio: &AudioUtterance, language: &str) -> Result<String, ProviderError> {
        self.wait().await;
        self.inner.transcribe(audio, language).await
    }
}

#[async_trait]
impl<P: LlmProvider> LlmProvider for Delayed<P> {
    async fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError> {
        self.wait().await;
        self.inner.complete(request).await
    }
}

#[async_trait]
impl<P: TtsProvider> TtsProvider for Delayed<P> {
    async fn synthesize(&self, request: &SynthesisRequest) -> Result<Synthesis, ProviderError> {
        self.wait().await;
        self.inner.synthesize(request).await
    }
}

#[async_trait]
impl<P: ModerationProvider> ModerationProvider for Delayed<P> {
    async fn score(&self, utterance: &str) -> Result<f64, ProviderError> {
        self.wait().await;
        self.inner.score(utterance).await
    }
}

impl super::Providers {
    /// All-mock provider set with the given cue table and blocklist.
    pub fn mock(llm: MockLlm, blocklist: MockModeration) -> Self {
        Self {
            stt: Arc::new(MockStt),
            llm: Arc::new(llm),
            tts: Arc::new(MockTts::default()),
            moderation: Arc::new(blocklist),
        }
    }
}
