//! Post-call coaching feedback.
//!
//! The model is shown the user's goal and the numbered transcript and must
//! answer in a line grammar:
//!
//! ```text
//! STRENGTH <turn>: <claim>
//! WEAKNESS <turn>: <claim>
//! ACTION: <imperative suggestion>
//! ```
//!
//! Citations must point at user turns. Bad citations are dropped; if that
//! leaves a section empty the request is retried once.

use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{ChatMessage, LlmRequest, RequestPurpose, Role, Speaker, Transcript};
use crate::providers::{complete, LlmProvider, ProviderError};

/// Used when the user did not state a goal.
pub const DEFAULT_GOAL: &str = "Communicate clearly and confidently in conversation.";

const COACH_SYSTEM: &str = "You are an experienced communication coach. \
You review a conversation between a user and a virtual agent and give the user \
honest, specific and encouraging feedback on their communication skills, \
judged against the user's goal.";

const OUTPUT_RULES: &str = "Answer using only lines in these formats:\n\
STRENGTH <turn>: <something the user did well>\n\
WEAKNESS <turn>: <something the user could improve>\n\
ACTION: <one concrete next step, phrased as an instruction>\n\
<turn> is the number of a USER turn from the transcript. \
Give at least one line of each kind.";

const RETRY_NOTE: &str = "Your previous answer could not be used. Every STRENGTH and \
WEAKNESS line must cite the number of a USER turn shown above, and each kind of line \
must appear at least once.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub claim: String,
    pub turn_index: usize,
    /// Text of the cited user turn.
    pub quote: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub goal: String,
    pub strengths: Vec<Evidence>,
    pub weaknesses: Vec<Evidence>,
    pub actions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeedbackError {
    #[error("transcript has no user turns")]
    EmptyTranscript,
    #[error("feedback goal is empty")]
    EmptyGoal,
    #[error("model reply could not be parsed into a complete report after {attempts} attempts")]
    UnparseableFeedback { attempts: u32 },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

fn transcript_line(index: usize, speaker: Speaker, emotion: Option<&str>, text: &str) -> String {
    match (speaker, emotion) {
        (Speaker::User, _) => format!("[{index}] USER: {text}"),
        (Speaker::Agent, Some(e)) => format!("[{index}] AGENT ({e}): {text}"),
        (Speaker::Agent, None) => format!("[{index}] AGENT: {text}"),
    }
}

/// Indices of `[n] USER:` lines in a rendered transcript.
pub fn numbered_user_turns(text: &str) -> Vec<usize> {
    text.lines()
        .filter_map(|l| {
            let rest = l.trim_start().strip_prefix('[')?;
            let (n, tail) = rest.split_once(']')?;
            tail.trim_start().starts_with("USER:").then(|| n.trim().parse().ok())?
        })
        .collect()
}

/// The request sent to the model. Contains only the goal, the transcript
/// and fixed template text.
pub fn build_feedback_request(transcript: &Transcript, goal: &str, retry: bool) -> LlmRequest {
    let mut body = String::new();
    let _ = writeln!(body, "User's goal: {}", goal.trim());
    body.push_str("\nTranscript:\n");
    for (i, t) in transcript.turns().iter().enumerate() {
        let emotion = t.emotion().map(|e| e.as_str());
        let _ = writeln!(body, "{}", transcript_line(i, t.speaker(), emotion, t.text()));
    }
    body.push('\n');
    body.push_str(OUTPUT_RULES);
    if retry {
        body.push_str("\n\n");
        body.push_str(RETRY_NOTE);
    }
    LlmRequest {
        system: COACH_SYSTEM.to_string(),
        messages: vec![ChatMessage { role: Role::User, content: body }],
        purpose: RequestPurpose::Feedback,
    }
}

#[derive(Debug, Default, PartialEq)]
struct ParsedReply {
    strengths: Vec<(usize, String)>,
    weaknesses: Vec<(usize, String)>,
    actions: Vec<String>,
}

fn strip_keyword<'a>(line: &'a str, keyword: &str) -> Option<&'a str> {
    let head = line.get(..keyword.len())?;
    head.eq_ignore_ascii_case(keyword).then(|| &line[keyword.len()..])
}

fn parse_cited(rest: &str) -> Option<(usize, String)> {
    let (idx, claim) = rest.split_once(':')?;
    let idx = idx.trim().trim_start_matches('[').trim_end_matches(']').trim();
    let claim = claim.trim();
    if claim.is_empty() {
        return None;
    }
    Some((idx.parse().ok()?, claim.to_string()))
}

fn parse_reply(raw: &str) -> ParsedReply {
    let mut out = ParsedReply::default();
    for line in raw.lines() {
        let line = line.trim().trim_start_matches(['-', '*', '•']).trim().trim_matches('*').trim();
        if let Some(rest) = strip_keyword(line, "STRENGTH") {
            out.strengths.extend(parse_cited(rest));
        } else if let Some(rest) = strip_keyword(line, "WEAKNESS") {
            out.weaknesses.extend(parse_cited(rest));
        } else if let Some(rest) = strip_keyword(line, "ACTION") {
            if let Some(action) = rest.trim_start().strip_prefix(':').map(str::trim) {
                if !action.is_empty() {
                    out.actions.push(action.to_string());
                }
            }
        }
    }
    out
}

fn cite(transcript: &Transcript, items: Vec<(usize, String)>) -> Vec<Evidence> {
    items
        .into_iter()
        .filter_map(|(turn_index, claim)| {
            let turn = transcript.turns().get(turn_index)?;
            (turn.speaker() == Speaker::User).then(|| Evidence {
                claim,
                turn_index,
                quote: turn.text().to_string(),
            })
        })
        .collect()
}

fn to_report(transcript: &Transcript, goal: &str, parsed: ParsedReply) -> Option<FeedbackReport> {
    let report = FeedbackReport {
        goal: goal.trim().to_string(),
        strengths: cite(transcript, parsed.strengths),
        weaknesses: cite(transcript, parsed.weaknesses),
        actions: parsed.actions,
    };
    let complete = !report.strengths.is_empty() && !report.weaknesses.is_empty() && !report.actions.is_empty();
    complete.then_some(report)
}

/// Asks the model for feedback on a finished conversation.
pub async fn generate_feedback(
    provider: &dyn LlmProvider,
    transcript: &Transcript,
    goal: &str,
    budget: Duration,
) -> Result<FeedbackReport, FeedbackError> {
    if transcript.user_turn_count() == 0 {
        return Err(FeedbackError::EmptyTranscript);
    }
    if goal.trim().is_empty() {
        return Err(FeedbackError::EmptyGoal);
    }
    const ATTEMPTS: u32 = 2;
    for attempt in 0..ATTEMPTS {
        let request = build_feedback_request(transcript, goal, attempt > 0);
        let raw = complete(provider, &request, budget).await?;
        if let Some(report) = to_report(transcript, goal, parse_reply(&raw)) {
            return Ok(report);
        }
        tracing::debug!(attempt, "feedback reply incomplete");
    }
    Err(FeedbackError::UnparseableFeedback { attempts: ATTEMPTS })
}

/// Plain-text rendering with Goal / Strengths / Weaknesses / Next steps.
pub fn render_feedback_text(report: &FeedbackReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Goal: {}", report.goal);
    for (title, items) in [("Strengths", &report.strengths), ("Weaknesses", &report.weaknesses)] {
        let _ = writeln!(out, "\n{title}:");
        for e in items {
            let _ = writeln!(out, "  * {}", e.claim);
            let _ = writeln!(out, "    > \"{}\" (turn {})", e.quote, e.turn_index);
        }
    }
    out.push_str("\nNext steps:\n");
    for a in &report.actions {
        let _ = writeln!(out, "- {a}");
    }
    out
}
