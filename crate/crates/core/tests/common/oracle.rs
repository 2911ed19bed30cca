//! Straightforward reference implementations used to check the real ones.

use std::time::Duration;

/// Frames needed to cover `duration_ms` at `fps`, via floating point.
pub fn frame_count(duration_ms: u64, fps: u32) -> usize {
    (duration_ms as f64 / 1000.0 * fps as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Where an output frame comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Source {
    Plain(usize),
    Seam { tail: usize, head: usize, alpha: f64 },
}

/// Lays tiles end to end: the first tile without its tail, then for each
/// further tile a seam that fades the previous tail into the new head,
/// then the new tile's body.
pub fn tile_sources(len: usize, fps: u32, duration_ms: u64) -> Vec<Source> {
    let n = frame_count(duration_ms, fps);
    if n <= len {
        return (0..n).map(Source::Plain).collect();
    }
    let w = ((fps as f64 * 0.2).floor() as usize).min(len / 2);
    let mut out: Vec<Source> = (0..len - w).map(Source::Plain).collect();
    while out.len() < n {
        for j in 0..w {
            out.push(Source::Seam { tail: len - w + j, head: j, alpha: (j + 1) as f64 / (w + 1) as f64 });
        }
        out.extend((w..len - w).map(Source::Plain));
    }
    out.truncate(n);
    out
}

pub fn tile(frames: &[Vec<f32>], fps: u32, duration_ms: u64) -> Vec<Vec<f64>> {
    tile_sources(frames.len(), fps, duration_ms)
        .into_iter()
        .map(|s| match s {
            Source::Plain(k) => frames[k].iter().map(|&x| x as f64).collect(),
            Source::Seam { tail, head, alpha } => frames[tail]
                .iter()
                .zip(&frames[head])
                .map(|(&t, &h)| (1.0 - alpha) * t as f64 + alpha * h as f64)
                .collect(),
        })
        .collect()
}

/// Index of the utterance that closes the session, if any.
pub fn strike_close(flags: &[bool], limit: u32) -> Option<usize> {
    let mut seen = 0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            seen += 1;
            if seen == limit {
                return Some(i);
            }
        }
    }
    None
}

/// For ticks at the given elapsed times: the tick index that reports the
/// warning and the one that reports the close.
pub fn timer_events(ticks: &[Duration], warn: Duration, close: Duration) -> (Option<usize>, Option<usize>) {
    let close_at = ticks.iter().position(|&t| t >= close);
    let warn_at = ticks
        .iter()
        .position(|&t| t >= warn)
        .filter(|&i| ticks[i] < close);
    (warn_at, close_at)
}
