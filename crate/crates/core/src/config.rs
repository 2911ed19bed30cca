//! Server configuration: a TOML file plus `FACETALK_*` environment overrides.
//!
//! Relative paths in the file are resolved against the file's directory.
//!
//! | variable                         | field                          |
//! |----------------------------------|--------------------------------|
//! | `FACETALK_BIND`                  | `bind`                         |
//! | `FACETALK_CLIP_LIBRARY`          | `clip_library`                 |
//! | `FACETALK_PERSONAS_DIR`          | `personas_dir`                 |
//! | `FACETALK_GUARDRAILS`            | `guardrails`                   |
//! | `FACETALK_SEED`                  | `seed`                         |
//! | `FACETALK_TICK_MS`               | `tick_ms`                      |
//! | `FACETALK_WARN_AFTER_SECS`       | `timers.warn_after`            |
//! | `FACETALK_CLOSE_AFTER_SECS`      | `timers.close_after`           |
//! | `FACETALK_STRIKE_LIMIT`          | `abuse_strike_limit`           |
//! | `FACETALK_MODERATION_THRESHOLD`  | `moderation_threshold`         |
//! | `FACETALK_EXPORT_DIR`            | `export_dir`                   |
//! | `FACETALK_<KIND>_PROVIDER`       | `providers.<kind>` (mock/http) |
//! | `FACETALK_<KIND>_URL`            | `providers.<kind>_url`         |
//!
//! API keys are only read from the environment (`FACETALK_<KIND>_API_KEY`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::expression::{load_clip_library, ClipLibrary};
use crate::persona::{validate_persona, GuardrailPolicy, PersonaError, PersonaSpec, ValidatedPersona, DEFAULT_LANGUAGES};
use crate::pipeline::Orchestrator;
use crate::providers::http::{Endpoint, HttpLlm, HttpModeration, HttpStt, HttpTts};
use crate::providers::mock::{MockLlm, MockModeration, MockStt, MockTts};
use crate::providers::{ProviderBudgets, ProviderKind, Providers};
use crate::session::{Clock, SessionTimers, SystemClock};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("invalid config {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("clip library {path}: {reason}")]
    ClipLibrary { path: PathBuf, reason: String },
    #[error("persona {path}: {}", join(errors))]
    Persona { path: PathBuf, errors: Vec<PersonaError> },
    #[error("environment variable {var}: {reason}")]
    Env { var: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

fn join(errors: &[PersonaError]) -> String {
    errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderChoice {
    #[default]
    Mock,
    Http,
}

impl std::str::FromStr for ProviderChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mock" => Ok(Self::Mock),
            "http" => Ok(Self::Http),
            other => Err(format!("expected `mock` or `http`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    #[serde(default)]
    pub stt: ProviderChoice,
    #[serde(default)]
    pub llm: ProviderChoice,
    #[serde(default)]
    pub tts: ProviderChoice,
    #[serde(default)]
    pub moderation: ProviderChoice,
    pub stt_url: Option<String>,
    pub llm_url: Option<String>,
    pub tts_url: Option<String>,
    pub moderation_url: Option<String>,
    /// JSON object mapping trigger substrings to raw replies.
    pub mock_cues: Option<PathBuf>,
    /// JSON array of blocked words.
    pub mock_blocklist: Option<PathBuf>,
}

impl ProviderConfig {
    fn choice_mut(&mut self, kind: ProviderKind) -> (&mut ProviderChoice, &mut Option<String>) {
        match kind {
            ProviderKind::Stt => (&mut self.stt, &mut self.stt_url),
            ProviderKind::Llm => (&mut self.llm, &mut self.llm_url),
            ProviderKind::Tts => (&mut self.tts, &mut self.tts_url),
            ProviderKind::Moderation => (&mut self.moderation, &mut self.moderation_url),
        }
    }
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

fn default_tick_ms() -> u64 {
    250
}

fn default_feedback_grace_secs() -> u64 {
    300
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    pub clip_library: PathBuf,
    pub personas_dir: Option<PathBuf>,
    /// Guardrail policy file; the bundled default when absent.
    pub guardrails: Option<PathBuf>,
    pub supported_languages: Option<Vec<String>>,
    #[serde(default)]
    pub timers: SessionTimers,
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    pub abuse_strike_limit: Option<u32>,
    pub moderation_threshold: Option<f64>,
    #[serde(default)]
    pub providers: ProviderConfig,
    #[serde(default)]
    pub budgets: ProviderBudgets,
    #[serde(default)]
    pub seed: u64,
    /// Closed-session transcripts are written here when set. Off by default.
    pub export_dir: Option<PathBuf>,
    /// How long a closed session keeps its transcript for a feedback request.
    #[serde(default = "default_feedback_grace_secs")]
    pub feedback_grace_secs: u64,
}

impl ServerConfig {
    /// Reads the file, applies process environment overrides, resolves paths.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::load_with_env(path, |k| std::env::var(k).ok())
    }

    pub fn load_with_env(path: &Path, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.to_path_buf(), reason: e.to_string() })?;
        let mut cfg = Self::from_toml_str(&raw)
            .map_err(|reason| ConfigError::Parse { path: path.to_path_buf(), reason })?;
        cfg.apply_env(env)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_toml_str(raw: &str) -> Result<Self, String> {
        toml::from_str(raw).map_err(|e| e.to_string())
    }

    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(var: &str, v: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            v.trim().parse().map_err(|e: T::Err| ConfigError::Env { var: var.into(), reason: e.to_string() })
        }
        let get = |k: &str| env(k).filter(|v| !v.trim().is_empty());

        if let Some(v) = get("FACETALK_BIND") {
            self.bind = v;
        }
        if let Some(v) = get("FACETALK_CLIP_LIBRARY") {
            self.clip_library = v.into();
        }
        if let Some(v) = get("FACETALK_PERSONAS_DIR") {
            self.personas_dir = Some(v.into());
        }
        if let Some(v) = get("FACETALK_GUARDRAILS") {
            self.guardrails = Some(v.into());
        }
        if let Some(v) = get("FACETALK_EXPORT_DIR") {
            self.export_dir = Some(v.into());
        }
        if let Some(v) = get("FACETALK_SEED") {
            self.seed = parse("FACETALK_SEED", &v)?;
        }
        if let Some(v) = get("FACETALK_TICK_MS") {
            self.tick_ms = parse("FACETALK_TICK_MS", &v)?;
        }
        if let Some(v) = get("FACETALK_WARN_AFTER_SECS") {
            self.timers.warn_after = Duration::from_secs_f64(parse("FACETALK_WARN_AFTER_SECS", &v)?);
        }
        if let Some(v) = get("FACETALK_CLOSE_AFTER_SECS") {
            self.timers.close_after = Duration::from_secs_f64(parse("FACETALK_CLOSE_AFTER_SECS", &v)?);
        }
        if let Some(v) = get("FACETALK_STRIKE_LIMIT") {
            self.abuse_strike_limit = Some(parse("FACETALK_STRIKE_LIMIT", &v)?);
        }
        if let Some(v) = get("FACETALK_MODERATION_THRESHOLD") {
            self.moderation_threshold = Some(parse("FACETALK_MODERATION_THRESHOLD", &v)?);
        }
        for kind in [ProviderKind::Stt, ProviderKind::Llm, ProviderKind::Tts, ProviderKind::Moderation] {
            let prefix = format!("FACETALK_{}", kind.to_string().to_uppercase());
            let (choice, url) = self.providers.choice_mut(kind);
            let var = format!("{prefix}_PROVIDER");
            if let Some(v) = get(&var) {
                *choice = parse(&var, &v)?;
            }
            if let Some(v) = get(&format!("{prefix}_URL")) {
                *url = Some(v);
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.clip_library);
        for p in [
            &mut self.personas_dir,
            &mut self.guardrails,
            &mut self.export_dir,
            &mut self.providers.mock_cues,
            &mut self.providers.mock_blocklist,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    fn check(&self) -> Result<(), ConfigError> {
        if self.tick_ms == 0 {
            return Err(ConfigError::Invalid("tick_ms must be positive".into()));
        }
        SessionTimers::new(self.timers.warn_after, self.timers.close_after)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn tick(&self) -> Duration {
        Duration::from_millis(self.tick_ms)
    }

    pub fn languages(&self) -> Vec<String> {
        match &self.supported_languages {
            Some(l) => l.clone(),
            None => DEFAULT_LANGUAGES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn load_library(&self) -> Result<ClipLibrary, ConfigError> {
        load_clip_library(&self.clip_library).map_err(|e| ConfigError::ClipLibrary {
            path: self.clip_library.clone(),
            reason: e.to_string(),
        })
    }

    /// Guardrail file (or bundled default) with the strike limit and
    /// threshold overrides applied.
    pub fn load_policy(&self) -> Result<GuardrailPolicy, ConfigError> {
        let mut policy = match &self.guardrails {
            Some(p) => {
                let raw = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::Io { path: p.clone(), reason: e.to_string() })?;
                serde_json::from_str(&raw)
                    .map_err(|e| ConfigError::Parse { path: p.clone(), reason: e.to_string() })?
            }
            None => GuardrailPolicy::default(),
        };
        if let Some(n) = self.abuse_strike_limit {
            policy.abuse_strike_limit = n;
        }
        if let Some(t) = self.moderation_threshold {
            policy.moderation_threshold = t;
        }
        policy.validate().map_err(|errors| ConfigError::Persona {
            path: self.guardrails.clone().unwrap_or_else(|| "<bundled guardrails>".into()),
            errors,
        })?;
        Ok(policy)
    }

    /// Every `*.json` file in the personas directory, keyed by file stem.
    pub fn load_personas(&self) -> Result<BTreeMap<String, ValidatedPersona>, ConfigError> {
        let mut out = BTreeMap::new();
        let Some(dir) = &self.personas_dir else {
            return Ok(out);
        };
        let io = |e: std::io::Error| ConfigError::Io { path: dir.clone(), reason: e.to_string() };
        let languages = self.languages();
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
                continue;
            };
            let raw = std::fs::read_to_string(&path)
                .map_err(|e| ConfigError::Io { path: path.clone(), reason: e.to_string() })?;
            let spec: PersonaSpec = serde_json::from_str(&raw)
                .map_err(|e| ConfigError::Parse { path: path.clone(), reason: e.to_string() })?;
            let persona = validate_persona(spec, &languages).map_err(|errors| ConfigError::Persona { path, errors })?;
            out.insert(id, persona);
        }
        Ok(out)
    }

    /// Mock providers regardless of the per-provider choice.
    pub fn mock_providers(&self) -> Result<Providers, ConfigError> {
        let llm = match &self.providers.mock_cues {
            Some(p) => MockLlm::from_json_file(p).map_err(|reason| ConfigError::Parse { path: p.clone(), reason })?,
            None => MockLlm::default(),
        };
        let moderation = match &self.providers.mock_blocklist {
            Some(p) => {
                MockModeration::from_json_file(p).map_err(|reason| ConfigError::Parse { path: p.clone(), reason })?
            }
            None => MockModeration::default(),
        };
        Ok(Providers::mock(llm, moderation))
    }

    pub fn providers(&self) -> Result<Providers, ConfigError> {
        let mut providers = self.mock_providers()?;
        let pc = &self.providers;
        let endpoint = |kind: ProviderKind, url: &Option<String>| -> Result<Endpoint, ConfigError> {
            let from_env = Endpoint::from_env(kind);
            let url = url
                .clone()
                .or_else(|| from_env.as_ref().map(|e| e.url.clone()))
                .ok_or_else(|| ConfigError::Invalid(format!("{kind} provider is `http` but no URL is configured")))?;
            Ok(Endpoint { url, api_key: from_env.and_then(|e| e.api_key) })
        };
        if pc.stt == ProviderChoice::Http {
            providers.stt = Arc::new(HttpStt::new(endpoint(ProviderKind::Stt, &pc.stt_url)?));
        } else {
            providers.stt = Arc::new(MockStt);
        }
        if pc.llm == ProviderChoice::Http {
            providers.llm = Arc::new(HttpLlm::new(endpoint(ProviderKind::Llm, &pc.llm_url)?));
        }
        if pc.tts == ProviderChoice::Http {
            providers.tts = Arc::new(HttpTts::new(endpoint(ProviderKind::Tts, &pc.tts_url)?));
        } else {
            providers.tts = Arc::new(MockTts::default());
        }
        if pc.moderation == ProviderChoice::Http {
            providers.moderation = Arc::new(HttpModeration::new(endpoint(ProviderKind::Moderation, &pc.moderation_url)?));
        }
        Ok(providers)
    }
}

/// Everything a running gateway needs, loaded and validated up front.
#[derive(Clone)]
pub struct AppContext {
    pub orchestrator: Arc<Orchestrator>,
    pub personas: Arc<BTreeMap<String, ValidatedPersona>>,
    pub policy: GuardrailPolicy,
    pub languages: Arc<[String]>,
    pub timers: SessionTimers,
    pub tick: Duration,
    pub clock: Arc<dyn Clock>,
    pub export_dir: Option<PathBuf>,
    pub feedback_grace: Duration,
}

impl AppContext {
    pub fn from_config(cfg: &ServerConfig) -> Result<Self, ConfigError> {
        Self::with_providers(cfg, cfg.providers()?)
    }

    pub fn with_providers(cfg: &ServerConfig, providers: Providers) -> Result<Self, ConfigError> {
        let library = Arc::new(cfg.load_library()?);
        Ok(Self {
            orchestrator: Arc::new(Orchestrator::new(providers, library, cfg.budgets, cfg.seed)),
            personas: Arc::new(cfg.load_personas()?),
            policy: cfg.load_policy()?,
            languages: cfg.languages().into(),
            timers: cfg.timers,
            tick: cfg.tick(),
            clock: Arc::new(SystemClock::new()),
            export_dir: cfg.export_dir.clone(),
            feedback_grace: Duration::from_secs(cfg.feedback_grace_secs),
        })
    }
}

impl std::fmt::Debug for AppContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppContext")
            .field("personas", &self.personas.keys().collect::<Vec<_>>())
            .field("timers", &self.timers)
            .field("tick", &self.tick)
            .finish_non_exhaustive()
    }
}
