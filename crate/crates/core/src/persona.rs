//! User-defined agent identity and the system prompt that conditions the LLM.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::EmotionLabel;

pub const MAX_TRAIT_CHARS: usize = 200;

/// Marker written in place of an empty section.
pub const NONE_MARKER: &str = "NONE";

/// Default language list; deployments override it in the server config.
pub const DEFAULT_LANGUAGES: [&str; 13] = [
    "en-US", "es-ES", "fr-FR", "de-DE", "it-IT", "pt-BR", "ja-JP", "ko-KR", "zh-CN", "hi-IN",
    "ar-SA", "ru-RU", "bn-BD",
];

const DEFAULT_GUARDRAILS_JSON: &str = include_str!("../../../assets/guardrails.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaSpec {
    pub agent_name: String,
    pub personality_traits: Vec<String>,
    #[serde(default)]
    pub background: String,
    pub premise: String,
    #[serde(default)]
    pub user_info: BTreeMap<String, String>,
    pub language: String,
    pub avatar_id: String,
    pub voice_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardrailPolicy {
    pub directives: Vec<String>,
    #[serde(default = "default_strike_limit")]
    pub abuse_strike_limit: u32,
    #[serde(default = "default_threshold")]
    pub moderation_threshold: f64,
}

fn default_strike_limit() -> u32 {
    3
}

fn default_threshold() -> f64 {
    0.5
}

impl Default for GuardrailPolicy {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_GUARDRAILS_JSON).expect("bundled guardrails parse")
    }
}

impl GuardrailPolicy {
    pub fn validate(&self) -> Result<(), Vec<PersonaError>> {
        let mut errors = Vec::new();
        if self.directives.is_empty() || self.directives.iter().any(|d| d.trim().is_empty()) {
            errors.push(PersonaError::EmptyField("directives"));
        }
        if self.abuse_strike_limit == 0 {
            errors.push(PersonaError::InvalidStrikeLimit);
        }
        if !(0.0..=1.0).contains(&self.moderation_threshold) {
            errors.push(PersonaError::ThresholdOutOfRange(self.moderation_threshold));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// A score at or above the threshold counts as a strike.
    pub fn is_flagged(&self, score: f64) -> bool {
        score >= self.moderation_threshold
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PersonaError {
    #[error("field `{0}` must not be empty")]
    EmptyField(&'static str),
    #[error("personality trait #{0} exceeds {MAX_TRAIT_CHARS} characters")]
    TraitTooLong(usize),
    #[error("language `{0}` is not supported")]
    UnsupportedLanguage(String),
    #[error("abuse strike limit must be at least 1")]
    InvalidStrikeLimit,
    #[error("moderation threshold {0} is outside [0, 1]")]
    ThresholdOutOfRange(f64),
}

/// A [`PersonaSpec`] that passed [`validate_persona`]. Only obtainable
/// through validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ValidatedPersona(PersonaSpec);

impl ValidatedPersona {
    pub fn into_inner(self) -> PersonaSpec {
        self.0
    }
}

impl Deref for ValidatedPersona {
    type Target = PersonaSpec;

    fn deref(&self) -> &PersonaSpec {
        &self.0
    }
}

/// Checks every invariant and reports all violations, not just the first.
pub fn validate_persona<S: AsRef<str>>(
    spec: PersonaSpec,
    supported_languages: &[S],
) -> Result<ValidatedPersona, Vec<PersonaError>> {
    let mut errors = Vec::new();
    if spec.agent_name.trim().is_empty() {
        errors.push(PersonaError::EmptyField("agent_name"));
    }
    if spec.premise.trim().is_empty() {
        errors.push(PersonaError::EmptyField("premise"));
    }
    if spec.personality_traits.is_empty() {
        errors.push(PersonaError::EmptyField("personality_traits"));
    }
    for (i, t) in spec.personality_traits.iter().enumerate() {
        if t.chars().count() > MAX_TRAIT_CHARS {
            errors.push(PersonaError::TraitTooLong(i));
        }
    }
    let supported = is_well_formed_language_tag(&spec.language)
        && supported_languages
            .iter()
            .any(|l| l.as_ref().eq_ignore_ascii_case(&spec.language));
    if !supported {
        errors.push(PersonaError::UnsupportedLanguage(spec.language.clone()));
    }
    if errors.is_empty() {
        Ok(ValidatedPersona(spec))
    } else {
        Err(errors)
    }
}

/// Syntactic BCP-47 check (language, extlang, script, region, variants,
/// extensions and private use). Grandfathered tags are not accepted.
pub fn is_well_formed_language_tag(tag: &str) -> bool {
    let subtags: Vec<&str> = tag.split('-').collect();
    if subtags.iter().any(|s| s.is_empty() || s.len() > 8 || !s.chars().all(|c| c.is_ascii_alphanumeric())) {
        return false;
    }
    let alpha = |s: &str| s.chars().all(|c| c.is_ascii_alphabetic());
    let digit = |s: &str| s.chars().all(|c| c.is_ascii_digit());

    let mut it = subtags.iter().copied().peekable();
    let Some(lang) = it.next() else { return false };
    if lang.eq_ignore_ascii_case("x") {
        return it.peek().is_some();
    }
    if !(alpha(lang) && (2..=8).contains(&lang.len())) {
        return false;
    }
    if (2..=3).contains(&lang.len()) {
        for _ in 0..3 {
            match it.peek() {
                Some(s) if s.len() == 3 && alpha(s) => {
                    it.next();
                }
                _ => break,
            }
        }
    }
    if matches!(it.peek(), Some(s) if s.len() == 4 && alpha(s)) {
        it.next();
    }
    if matches!(it.peek(), Some(s) if (s.len() == 2 && alpha(s)) || (s.len() == 3 && digit(s))) {
        it.next();
    }
    while let Some(s) = it.peek() {
        let is_variant = s.len() >= 5 || (s.len() == 4 && s.as_bytes()[0].is_ascii_digit());
        if !is_variant {
            break;
        }
        it.next();
    }
    // extensions and private use
    while let Some(singleton) = it.next() {
        if singleton.len() != 1 {
            return false;
        }
        let private = singleton.eq_ignore_ascii_case("x");
        let min = if private { 1 } else { 2 };
        let mut count = 0;
        while let Some(s) = it.peek() {
            if s.len() == 1 && !private {
                break;
            }
            if s.len() < min {
                return false;
            }
            it.next();
            count += 1;
        }
        if count == 0 {
            return false;
        }
    }
    true
}

fn language_name(tag: &str) -> Option<&'static str> {
    let primary = tag.split('-').next()?.to_ascii_lowercase();
    Some(match primary.as_str() {
        "en" => "English",
        "es" => "Spanish",
        "fr" => "French",
        "de" => "German",
        "it" => "Italian",
        "pt" => "Portuguese",
        "ja" => "Japanese",
        "ko" => "Korean",
        "zh" => "Chinese",
        "hi" => "Hindi",
        "ar" => "Arabic",
        "ru" => "Russian",
        "bn" => "Bengali",
        _ => return None,
    })
}

/// Builds the system prompt. Sections, in order: identity, scenario, user
/// facts, guardrails, emotion instruction, language instruction.
pub fn assemble_system_prompt(spec: &ValidatedPersona, policy: &GuardrailPolicy, goal: &str) -> String {
    let mut out = String::new();

    out.push_str("## Identity\n");
    let _ = writeln!(out, "You are {}.", spec.agent_name.trim());
    out.push_str("Personality traits:\n");
    for t in &spec.personality_traits {
        let _ = writeln!(out, "- {}", t.trim());
    }
    let background = spec.background.trim();
    let _ = writeln!(
        out,
        "Background: {}",
        if background.is_empty() { NONE_MARKER } else { background }
    );

    out.push_str("\n## Scenario\n");
    let _ = writeln!(out, "{}", spec.premise.trim());
    if !goal.trim().is_empty() {
        let _ = writeln!(out, "The user's goal for this conversation: {}", goal.trim());
    }

    out.push_str("\n## About the user\n");
    if spec.user_info.is_empty() {
        let _ = writeln!(out, "{NONE_MARKER}");
    } else {
        for (k, v) in &spec.user_info {
            let _ = writeln!(out, "- {}: {}", k.trim(), v.trim());
        }
    }

    out.push_str("\n## Rules\n");
    for d in &policy.directives {
        let _ = writeln!(out, "- {d}");
    }

    out.push_str("\n## Emotion\n");
    let _ = writeln!(
        out,
        "For every reply, pick your emotional state from the following list: {}.",
        EmotionLabel::enumerate_all()
    );
    out.push_str(
        "Start every reply with one line of the form `EMOTION: <label>`, then put your spoken reply on the following lines.\n",
    );

    out.push_str("\n## Language\n");
    match language_name(&spec.language) {
        Some(name) => {
            let _ = writeln!(out, "Always reply in {name} ({}).", spec.language);
        }
        None => {
            let _ = writeln!(out, "Always reply in the language with tag {}.", spec.language);
        }
    }
    out
}
