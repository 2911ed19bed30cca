//! Blendshape clip library and audio-synchronized animation tracks.
//!
//! A library file is one JSON document:
//!
//! ```json
//! { "fps": 30,
//!   "channels": ["browInnerUp", "jawOpen", ...],
//!   "clips": [ { "clip_id": "happy-1", "emotion": "Happy",
//!                "frames": [[0.0, 0.2, ...], ...] } ] }
//! ```
//!
//! Tracks are built by looping the selected clip until it covers the reply
//! audio. Consecutive loops overlap by a short window in which the tail of
//! one pass is linearly crossfaded into the head of the next.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::EmotionLabel;

pub const DEFAULT_FPS: u32 = 30;
/// Upper bound on the loop-seam crossfade.
pub const MAX_CROSSFADE_MS: u32 = 200;

/// The 52 ARKit-style face channels used by the bundled library.
pub const ARKIT_CHANNELS: [&str; 52] = [
    "eyeBlinkLeft", "eyeLookDownLeft", "eyeLookInLeft", "eyeLookOutLeft", "eyeLookUpLeft",
    "eyeSquintLeft", "eyeWideLeft", "eyeBlinkRight", "eyeLookDownRight", "eyeLookInRight",
    "eyeLookOutRight", "eyeLookUpRight", "eyeSquintRight", "eyeWideRight", "jawForward",
    "jawLeft", "jawRight", "jawOpen", "mouthClose", "mouthFunnel", "mouthPucker", "mouthLeft",
    "mouthRight", "mouthSmileLeft", "mouthSmileRight", "mouthFrownLeft", "mouthFrownRight",
    "mouthDimpleLeft", "mouthDimpleRight", "mouthStretchLeft", "mouthStretchRight",
    "mouthRollLower", "mouthRollUpper", "mouthShrugLower", "mouthShrugUpper", "mouthPressLeft",
    "mouthPressRight", "mouthLowerDownLeft", "mouthLowerDownRight", "mouthUpperUpLeft",
    "mouthUpperUpRight", "browDownLeft", "browDownRight", "browInnerUp", "browOuterUpLeft",
    "browOuterUpRight", "cheekPuff", "cheekSquintLeft", "cheekSquintRight", "noseSneerLeft",
    "noseSneerRight", "tongueOut",
];

/// One face pose: a weight in `[0, 1]` per channel.
pub type BlendshapeFrame = Vec<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeClip {
    pub clip_id: String,
    pub emotion: EmotionLabel,
    pub fps: u32,
    pub channels: Arc<[String]>,
    pub frames: Vec<BlendshapeFrame>,
}

impl BlendshapeClip {
    /// Builds a clip, checking frame shape, weight range and length.
    pub fn new(
        clip_id: impl Into<String>,
        emotion: EmotionLabel,
        fps: u32,
        channels: Arc<[String]>,
        frames: Vec<BlendshapeFrame>,
    ) -> Result<Self, ClipIssue> {
        let clip_id = clip_id.into();
        if fps == 0 {
            return Err(ClipIssue::InvalidFps(0));
        }
        check_frames(&clip_id, channels.len(), &frames)?;
        Ok(Self { clip_id, emotion, fps, channels, frames })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn duration_ms(&self) -> f64 {
        self.frames.len() as f64 * 1000.0 / self.fps as f64
    }
}

fn check_frames(clip_id: &str, width: usize, frames: &[BlendshapeFrame]) -> Result<(), ClipIssue> {
    if frames.len() < 2 {
        return Err(ClipIssue::TooFewFrames(clip_id.to_string()));
    }
    for (fi, f) in frames.iter().enumerate() {
        if f.len() != width {
            return Err(ClipIssue::ChannelMismatch(clip_id.to_string()));
        }
        if let Some(ci) = f.iter().position(|w| !(0.0..=1.0).contains(w)) {
            return Err(ClipIssue::WeightOutOfRange {
                clip_id: clip_id.to_string(),
                frame: fi,
                channel: ci,
            });
        }
    }
    Ok(())
}

/// A problem found while loading a clip library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClipIssue {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("parse error at line {line}, column {column}: {reason}")]
    ParseError { line: usize, column: usize, reason: String },
    #[error("no clip for emotion {0}")]
    MissingEmotion(EmotionLabel),
    #[error("clip `{0}` does not match the library channel list")]
    ChannelMismatch(String),
    #[error("clip `{clip_id}` frame {frame} channel {channel}: weight outside [0, 1]")]
    WeightOutOfRange { clip_id: String, frame: usize, channel: usize },
    #[error("clip `{0}` has fewer than 2 frames")]
    TooFewFrames(String),
    #[error("duplicate clip id `{0}`")]
    DuplicateClipId(String),
    #[error("invalid fps {0}")]
    InvalidFps(i64),
    #[error("channel list is empty")]
    NoChannels,
    #[error("duplicate channel `{0}`")]
    DuplicateChannel(String),
}

impl ClipIssue {
    /// Variant name, for diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            ClipIssue::Io { .. } => "Io",
            ClipIssue::ParseError { .. } => "ParseError",
            ClipIssue::MissingEmotion(_) => "MissingEmotion",
            ClipIssue::ChannelMismatch(_) => "ChannelMismatch",
            ClipIssue::WeightOutOfRange { .. } => "WeightOutOfRange",
            ClipIssue::TooFewFrames(_) => "TooFewFrames",
            ClipIssue::DuplicateClipId(_) => "DuplicateClipId",
            ClipIssue::InvalidFps(_) => "InvalidFps",
            ClipIssue::NoChannels => "NoChannels",
            ClipIssue::DuplicateChannel(_) => "DuplicateChannel",
        }
    }
}

/// All problems found in a library file. Loading is all-or-nothing.
#[derive(Debug, Clone, PartialEq, Error)]
pub struct LoadError {
    pub issues: Vec<ClipIssue>,
}

impl fmt::Display for LoadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.issues.iter().map(ToString::to_string).collect();
        f.write_str(&lines.join("; "))
    }
}

impl From<ClipIssue> for LoadError {
    fn from(issue: ClipIssue) -> Self {
        LoadError { issues: vec![issue] }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LibraryFile {
    fps: i64,
    channels: Vec<String>,
    clips: Vec<ClipFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClipFile {
    clip_id: String,
    emotion: EmotionLabel,
    frames: Vec<Vec<f32>>,
}

/// Clips indexed by emotion. Immutable once loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipLibrary {
    fps: u32,
    channels: Arc<[String]>,
    clips: BTreeMap<EmotionLabel, Vec<BlendshapeClip>>,
}

impl ClipLibrary {
    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn clips_for(&self, emotion: EmotionLabel) -> &[BlendshapeClip] {
        self.clips.get(&emotion).map_or(&[], Vec::as_slice)
    }

    pub fn emotion_count(&self) -> usize {
        self.clips.len()
    }

    pub fn clip_count(&self) -> usize {
        self.clips.values().map(Vec::len).sum()
    }

    /// Parses and validates a library document.
    pub fn from_json_str(raw: &str) -> Result<Self, LoadError> {
        let file: LibraryFile = serde_json::from_str(raw).map_err(|e| ClipIssue::ParseError {
            line: e.line(),
            column: e.column(),
            reason: e.to_string(),
        })?;

        let mut issues = Vec::new();
        if file.fps <= 0 || file.fps > u32::MAX as i64 {
            issues.push(ClipIssue::InvalidFps(file.fps));
        }
        if file.channels.is_empty() {
            issues.push(ClipIssue::NoChannels);
        }
        let mut seen = HashSet::new();
        for c in &file.channels {
            if !seen.insert(c.as_str()) {
                issues.push(ClipIssue::DuplicateChannel(c.clone()));
            }
        }

        let fps = file.fps.clamp(1, u32::MAX as i64) as u32;
        let channels: Arc<[String]> = file.channels.into();
        let mut clips: BTreeMap<EmotionLabel, Vec<BlendshapeClip>> = BTreeMap::new();
        let mut ids = HashSet::new();
        for c in file.clips {
            if !ids.insert(c.clip_id.clone()) {
                issues.push(ClipIssue::DuplicateClipId(c.clip_id.clone()));
                continue;
            }
            match check_frames(&c.clip_id, channels.len(), &c.frames) {
                Ok(()) => clips.entry(c.emotion).or_default().push(BlendshapeClip {
                    clip_id: c.clip_id,
                    emotion: c.emotion,
                    fps,
                    channels: Arc::clone(&channels),
                    frames: c.frames,
                }),
                Err(issue) => issues.push(issue),
            }
        }
        for e in EmotionLabel::ALL {
            if !clips.contains_key(&e) {
                issues.push(ClipIssue::MissingEmotion(e));
            }
        }

        if issues.is_empty() {
            Ok(Self { fps, channels, clips })
        } else {
            Err(LoadError { issues })
        }
    }

    /// Assembles a library from already-built clips (all must share fps and
    /// channels with the first clip).
    pub fn from_clips(clips: Vec<BlendshapeClip>) -> Result<Self, LoadError> {
        let first = clips.first().ok_or(ClipIssue::MissingEmotion(EmotionLabel::Neutral))?;
        let file = LibraryFile {
            fps: first.fps as i64,
            channels: first.channels.to_vec(),
            clips: clips
                .iter()
                .map(|c| ClipFile { clip_id: c.clip_id.clone(), emotion: c.emotion, frames: c.frames.clone() })
                .collect(),
        };
        if clips.iter().any(|c| c.fps != first.fps) {
            return Err(ClipIssue::InvalidFps(clips.iter().find(|c| c.fps != first.fps).unwrap().fps as i64).into());
        }
        if let Some(c) = clips.iter().find(|c| c.channels != first.channels) {
            return Err(ClipIssue::ChannelMismatch(c.clip_id.clone()).into());
        }
        Self::from_json_str(&serde_json::to_string(&file).expect("library serializes"))
    }

    pub fn to_json_string(&self) -> String {
        let file = LibraryFile {
            fps: self.fps as i64,
            channels: self.channels.to_vec(),
            clips: self
                .clips
                .values()
                .flatten()
                .map(|c| ClipFile { clip_id: c.clip_id.clone(), emotion: c.emotion, frames: c.frames.clone() })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("library serializes")
    }
}

/// Reads and validates a clip library file.
pub fn load_clip_library(path: &Path) -> Result<ClipLibrary, LoadError> {
    let raw = std::fs::read_to_string(path).map_err(|e| ClipIssue::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    ClipLibrary::from_json_str(&raw)
}

/// Picks a clip for `emotion`, uniformly over candidates, deterministic in
/// `seed`.
///
/// # Panics
///
/// If the library has no clip for `emotion`, which a validated library rules
/// out.
pub fn select_clip(library: &ClipLibrary, emotion: EmotionLabel, seed: u64) -> &BlendshapeClip {
    let candidates = library.clips_for(emotion);
    assert!(!candidates.is_empty(), "validated library has a clip for every emotion");
    if candidates.len() == 1 {
        return &candidates[0];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    &candidates[rng.random_range(0..candidates.len())]
}

/// A clip expanded to exactly cover a reply's audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnimationTrack {
    pub fps: u32,
    pub duration_ms: u64,
    pub frames: Vec<BlendshapeFrame>,
}

impl AnimationTrack {
    /// Presentation time of frame `i`.
    pub fn frame_time_ms(&self, i: usize) -> f64 {
        i as f64 * 1000.0 / self.fps as f64
    }
}

/// `ceil(duration_ms / 1000 * fps)` in exact integer arithmetic.
pub fn frames_for_duration(duration_ms: u64, fps: u32) -> usize {
    (duration_ms * fps as u64).div_ceil(1000) as usize
}

/// Crossfade window in frames: `min(200 ms, clip_duration / 2)`, rounded down.
pub fn crossfade_frames(clip_frames: usize, fps: u32) -> usize {
    let by_time = (MAX_CROSSFADE_MS as usize * fps as usize) / 1000;
    by_time.min(clip_frames / 2)
}

/// Loops `clip` to cover `audio_duration_ms`.
///
/// With `L` clip frames and a `W`-frame crossfade, pass `k >= 1` starts at
/// output frame `k * (L - W)`; its first `W` frames blend the previous
/// pass's last `W` frames with weight `alpha = (j + 1) / (W + 1)` on the
/// new pass. The output is cut at `ceil(d / 1000 * fps)` frames. A clip at
/// least as long as the audio is simply truncated.
pub fn build_animation_track(clip: &BlendshapeClip, audio_duration_ms: u64) -> AnimationTrack {
    let n = frames_for_duration(audio_duration_ms, clip.fps);
    let len = clip.frames.len();
    let frames = if n <= len {
        clip.frames[..n].to_vec()
    } else {
        let w = crossfade_frames(len, clip.fps);
        let period = len - w;
        (0..n)
            .map(|i| {
                let pass = i / period;
                let r = i % period;
                if pass == 0 || r >= w {
                    clip.frames[r].clone()
                } else {
                    let alpha = (r + 1) as f64 / (w + 1) as f64;
                    crossfade(&clip.frames[len - w + r], &clip.frames[r], alpha)
                }
            })
            .collect()
    };
    AnimationTrack {
        fps: clip.fps,
        duration_ms: audio_duration_ms,
        frames,
    }
}

fn crossfade(tail: &[f32], head: &[f32], alpha: f64) -> BlendshapeFrame {
    tail.iter()
        .zip(head)
        .map(|(&t, &h)| {
            let v = ((1.0 - alpha) * t as f64 + alpha * h as f64) as f32;
            v.clamp(t.min(h), t.max(h))
        })
        .collect()
}
