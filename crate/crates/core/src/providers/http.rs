//! Generic HTTP adapters for hosted speech, language and moderation services.
//!
//! Each adapter is configured from environment variables:
//!
//! | provider   | endpoint                   | key                            |
//! |------------|----------------------------|--------------------------------|
//! | STT        | `FACETALK_STT_URL`         | `FACETALK_STT_API_KEY`         |
//! | LLM        | `FACETALK_LLM_URL`         | `FACETALK_LLM_API_KEY`         |
//! | TTS        | `FACETALK_TTS_URL`         | `FACETALK_TTS_API_KEY`         |
//! | moderation | `FACETALK_MODERATION_URL`  | `FACETALK_MODERATION_API_KEY`  |
//!
//! Wire contract (all `POST`, bearer auth when a key is set):
//!
//! - STT: body is PCM16LE mono at 16 kHz, query `language`, `sample_rate`;
//!   response `{"text": "..."}`.
//! - LLM: body is the JSON [`LlmRequest`]; response `{"text": "..."}`.
//! - TTS: body is the JSON [`SynthesisRequest`]; response body is PCM16LE
//!   mono at 24 kHz.
//! - Moderation: body `{"text": "..."}`; response `{"score": 0.0..1.0}`.

use async_trait::async_trait;
use serde::Deserialize;

use super::{
    chunk_samples, AudioUtterance, LlmProvider, ModerationProvider, ProviderError, ProviderKind,
    SttProvider, Synthesis, SynthesisRequest, TtsProvider, STT_SAMPLE_RATE, TTS_SAMPLE_RATE,
};
use crate::dialogue::LlmRequest;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub url: String,
    pub api_key: Option<String>,
}

impl Endpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self { url: url.into(), api_key: None }
    }

    /// Reads `FACETALK_<NAME>_URL` and `FACETALK_<NAME>_API_KEY`.
    pub fn from_env(kind: ProviderKind) -> Option<Self> {
        let prefix = format!("FACETALK_{}", kind.to_string().to_uppercase());
        let url = std::env::var(format!("{prefix}_URL")).ok()?;
        let api_key = std::env::var(format!("{prefix}_API_KEY")).ok().filter(|k| !k.is_empty());
        Some(Self { url, api_key })
    }
}

#[derive(Debug, Clone)]
struct HttpClient {
    kind: ProviderKind,
    endpoint: Endpoint,
    client: reqwest::Client,
}

impl HttpClient {
    fn new(kind: ProviderKind, endpoint: Endpoint) -> Self {
        Self { kind, endpoint, client: reqwest::Client::new() }
    }

    fn post(&self) -> reqwest::RequestBuilder {
        let rb = self.client.post(&self.endpoint.url);
        match &self.endpoint.api_key {
            Some(k) => rb.bearer_auth(k),
            None => rb,
        }
    }

    async fn send(&self, rb: reqwest::RequestBuilder) -> Result<reqwest::Response, ProviderError> {
        let resp = rb
            .send()
            .await
            .map_err(|e| ProviderError::unavailable(self.kind, e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ProviderError::unavailable(self.kind, format!("HTTP {status}")));
        }
        Ok(resp)
    }

    fn invalid(&self, reason: impl ToString) -> ProviderError {
        ProviderError::InvalidResponse { provider: self.kind, reason: reason.to_string() }
    }
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

fn pcm16le(samples: impl Iterator<Item = i16>) -> Vec<u8> {
    samples.flat_map(i16::to_le_bytes).collect()
}

#[derive(Debug, Clone)]
pub struct HttpStt(HttpClient);

impl HttpStt {
    pub fn new(endpoint: Endpoint) -> Self {
        Self(HttpClient::new(ProviderKind::Stt, endpoint))
    }
}

#[async_trait]
impl SttProvider for HttpStt {
    async fn transcribe(&self, audio: &AudioUtterance, language: &str) -> Result<String, ProviderError> {
        let body = pcm16le(audio.chunks.iter().flat_map(|c| c.samples.iter().copied()));
        let rb = self
            .0
            .post()
            .query(&[("language", language), ("sample_rate", &STT_SAMPLE_RATE.to_string())])
            .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
            .body(body);
        let resp = self.0.send(rb).await?;
        let parsed: TextResponse = resp.json().await.map_err(|e| self.0.invalid(e))?;
        Ok(parsed.text)
    }
}

#[derive(Debug, Clone)]
pub struct HttpLlm(HttpClient);

impl HttpLlm {
    pub fn new(endpoint: Endpoint) -> Self {
        Self(HttpClient::new(ProviderKind::Llm, endpoint))
    }
}

#[async_trait]
impl LlmProvider for HttpLlm {
    async fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError> {
        let resp = self.0.send(self.0.post().json(request)).await?;
        let parsed: TextResponse = resp.json().await.map_err(|e| self.0.invalid(e))?;
        Ok(parsed.text)
    }
}

#[derive(Debug, Clone)]
pub struct HttpTts(HttpClient);

impl HttpTts {
    pub fn new(endpoint: Endpoint) -> Self {
        Self(HttpClient::new(ProviderKind::Tts, endpoint))
    }
}

#[async_trait]
impl TtsProvider for HttpTts {
    async fn synthesize(&self, request: &SynthesisRequest) -> Result<Synthesis, ProviderError> {
        let resp = self.0.send(self.0.post().json(request)).await?;
        let bytes = resp.bytes().await.map_err(|e| self.0.invalid(e))?;
        if bytes.len() % 2 != 0 {
            return Err(self.0.invalid("odd PCM16 byte count"));
        }
        let samples: Vec<i16> = bytes
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]))
            .collect();
        // whole milliseconds only; a sub-millisecond tail is dropped
        let duration_ms = samples.len() as u64 * 1000 / TTS_SAMPLE_RATE as u64;
        let keep = (duration_ms * TTS_SAMPLE_RATE as u64 / 1000) as usize;
        Ok(Synthesis {
            chunks: chunk_samples(&samples[..keep], TTS_SAMPLE_RATE, (TTS_SAMPLE_RATE / 10) as usize),
            duration_ms,
        })
    }
}

#[derive(Debug, Clone)]
pub struct HttpModeration(HttpClient);

impl HttpModeration {
    pub fn new(endpoint: Endpoint) -> Self {
        Self(HttpClient::new(ProviderKind::Moderation, endpoint))
    }
}

#[async_trait]
impl ModerationProvider for HttpModeration {
    async fn score(&self, utterance: &str) -> Result<f64, ProviderError> {
        let body = serde_json::json!({ "text": utterance });
        let resp = self.0.send(self.0.post().json(&body)).await?;
        let parsed: ScoreResponse = resp.json().await.map_err(|e| self.0.invalid(e))?;
        Ok(parsed.score)
    }
}
