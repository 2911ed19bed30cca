//! Real-time conversational agent backend: persona-conditioned dialogue with
//! emotion-tagged replies, speech and expression synthesis behind pluggable
//! providers, blendshape animation synchronised to reply audio, and a
//! WebSocket gateway that streams everything to a browser.
//!
//! Module map:
//!
//! - [`persona`]: agent identity, guardrails, system prompt assembly
//! - [`dialogue`]: transcripts, LLM requests, emotion header parsing
//! - [`session`]: call lifecycle, timers, abuse strikes
//! - [`providers`]: STT / LLM / TTS / moderation contracts, mocks, HTTP adapters
//! - [`expression`]: clip library and animation track construction
//! - [`feedback`]: post-call coaching report
//! - [`protocol`]: wire messages and binary audio framing
//! - [`pipeline`]: one turn from utterance to streamed reply
//! - [`server`]: the WebSocket gateway
//! - [`config`]: server configuration
//! - [`replay`]: headless scripted sessions

pub mod config;
pub mod dialogue;
pub mod expression;
pub mod feedback;
pub mod persona;
pub mod pipeline;
pub mod protocol;
pub mod providers;
pub mod replay;
pub mod server;
pub mod session;

pub use config::{AppContext, ConfigError, ServerConfig};
pub use dialogue::{EmotionLabel, Transcript, Turn};
pub use persona::{GuardrailPolicy, PersonaSpec};
pub use pipeline::Orchestrator;
pub use protocol::{ClientMessage, ServerMessage};
pub use replay::{replay, replay_with_config, ReplayError, ReplayOutput, ReplayScript};
pub use server::{serve, ServerHandle};
pub use session::{CloseReason, Session};
