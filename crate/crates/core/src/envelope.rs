//! Envelope weights and weighted-sum trajectory assembly.
//!
//! A trajectory over an N-note score is the sum of N dinote segments (pairs
//! of neighboring notes, covering transitions) and N mononote segments (note
//! interiors, carrying vibrato), each modulated by an envelope: linear
//! cross-fade ramps for dinotes, a convex parabola for mononotes. The ramps
//! of consecutive dinotes are complementary, so the dinote weights sum to one
//! between the first and last note onsets and the assembled trajectory
//! interpolates its segments.
//!
//! Dinote index 0 is the leading pseudo-dinote: a constant segment (the first
//! real dinote's value at the score start) whose weight is the complement of
//! dinote 1's up-ramp. Past the last note's onset the final dinote ramps down
//! to the score end; those frames lie inside the trailing silent note and are
//! unvoiced.

use crate::score::SUPPORT_EPS;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvelopeError {
    #[error("onsets must be strictly increasing: {context}")]
    NonMonotoneOnsets { context: String },
    #[error("{what} segment {index} does not align with the grid: expected frames {expected_start}..{expected_end}, got {got_start}..{got_end}")]
    GridMismatch {
        what: &'static str,
        index: usize,
        expected_start: usize,
        expected_end: usize,
        got_start: usize,
        got_end: usize,
    },
    #[error("assembly needs at least 2 notes, got {got}")]
    TooFewNotes { got: usize },
    #[error("expected {expected} {what}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("track grids differ: {left:?} vs {right:?}")]
    TrackGridMismatch { left: FrameGrid, right: FrameGrid },
}

/// Uniform time sampling: frame `k` maps to `start + k * period` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameGrid {
    pub start: f64,
    pub count: usize,
    pub period: f64,
}

impl FrameGrid {
    /// Grid covering `[start, end)` at the given period; the frame count is
    /// the rounded span over period.
    pub fn for_span(start: f64, end: f64, period: f64) -> FrameGrid {
        let count = ((end - start) / period).round().max(0.0) as usize;
        FrameGrid {
            start,
            count,
            period,
        }
    }

    pub fn time(&self, k: usize) -> f64 {
        self.start + k as f64 * self.period
    }

    /// Frames whose time lies in `[lo, hi]`, with a small tolerance at both
    /// edges, clamped to the grid.
    pub fn frames_in(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        if self.count == 0 || hi < lo {
            return 0..0;
        }
        let eps = SUPPORT_EPS / self.period;
        let a = (lo - self.start) / self.period;
        let b = (hi - self.start) / self.period;
        let first = (a - eps).ceil().max(0.0);
        let last = (b + eps).floor();
        if last < first || last < 0.0 {
            return 0..0;
        }
        let first = first as usize;
        let last = (last as usize).min(self.count - 1);
        if first > last {
            0..0
        } else {
            first..last + 1
        }
    }
}

/// A time-aligned log-F0 trajectory in MIDI semitones with a voicing mask.
/// Unvoiced frames still carry a value (the cross-fade extends into rests)
/// but are excluded from losses and error metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Track {
    pub grid: FrameGrid,
    pub log_f0: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl F0Track {
    pub fn ensure_same_grid(&self, other: &F0Track) -> Result<(), EnvelopeError> {
        if self.grid != other.grid {
            return Err(EnvelopeError::TrackGridMismatch {
                left: self.grid,
                right: other.grid,
            });
        }
        Ok(())
    }
}

/// A trajectory sampled on a sub-range of a shared frame grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start_frame: usize,
    pub values: Vec<f64>,
}

impl Segment {
    pub fn constant(frames: std::ops::Range<usize>, value: f64) -> Segment {
        Segment {
            start_frame: frames.start,
            values: vec![value; frames.len()],
        }
    }

    pub fn frames(&self) -> std::ops::Range<usize> {
        self.start_frame..self.start_frame + self.values.len()
    }
}

/// Linear cross-fade weight of a dinote with onsets `(t_prev, t_cur, t_next)`:
/// zero outside `[t_prev, t_next]`, ramping up to exactly 1 at `t_cur` and
/// back down to zero.
pub fn dinote_weight(t_prev: f64, t_cur: f64, t_next: f64, t: f64) -> Result<f64, EnvelopeError> {
    if !(t_prev < t_cur && t_cur < t_next) {
        return Err(EnvelopeError::NonMonotoneOnsets {
            context: format!("({t_prev}, {t_cur}, {t_next})"),
        });
    }
    Ok(dinote_weight_unchecked(t_prev, t_cur, t_next, t))
}

fn dinote_weight_unchecked(t_prev: f64, t_cur: f64, t_next: f64, t: f64) -> f64 {
    if t < t_prev || t > t_next {
        0.0
    } else if t < t_cur {
        (t - t_prev) / (t_cur - t_prev)
    } else {
        (t_next - t) / (t_next - t_cur)
    }
}

/// Convex parabola weight of a mononote spanning `[t_on, t_off]`: zero at and
/// outside the endpoints, exactly 1 at the midpoint.
pub fn mononote_weight(t_on: f64, t_off: f64, t: f64) -> Result<f64, EnvelopeError> {
    if t_on.partial_cmp(&t_off) != Some(std::cmp::Ordering::Less) {
        return Err(EnvelopeError::NonMonotoneOnsets {
            context: format!("({t_on}, {t_off})"),
        });
    }
    Ok(mononote_weight_unchecked(t_on, t_off, t))
}

fn mononote_weight_unchecked(t_on: f64, t_off: f64, t: f64) -> f64 {
    if t < t_on || t > t_off {
        0.0
    } else {
        let d = t_off - t_on;
        4.0 * (t - t_on) * (t_off - t) / (d * d)
    }
}

/// Envelope weight of dinote `k` against the corrected boundary array
/// (`boundaries[i]` is note `i`'s onset, the last entry the score end).
/// `k = 0` is the leading pseudo-dinote, weighted with the complement of
/// dinote 1's up-ramp; real dinotes peak at their own boundary.
pub fn dinote_weight_at(boundaries: &[f64], k: usize, t: f64) -> f64 {
    if k == 0 {
        let b0 = boundaries[0];
        let b1 = boundaries[1];
        if t <= b0 {
            1.0
        } else if t < b1 {
            (b1 - t) / (b1 - b0)
        } else {
            0.0
        }
    } else {
        dinote_weight_unchecked(boundaries[k - 1], boundaries[k], boundaries[k + 1], t)
    }
}

/// Envelope weight of mononote `i` against the corrected boundary array.
pub fn mononote_weight_at(boundaries: &[f64], i: usize, t: f64) -> f64 {
    mononote_weight_unchecked(boundaries[i], boundaries[i + 1], t)
}

/// Frames covered by dinote `k`'s envelope support.
pub fn dinote_support(grid: &FrameGrid, boundaries: &[f64], k: usize) -> std::ops::Range<usize> {
    if k == 0 {
        grid.frames_in(grid.start, boundaries[1])
    } else {
        grid.frames_in(boundaries[k - 1], boundaries[k + 1])
    }
}

/// Frames covered by mononote `i`'s envelope support.
pub fn mononote_support(grid: &FrameGrid, boundaries: &[f64], i: usize) -> std::ops::Range<usize> {
    grid.frames_in(boundaries[i], boundaries[i + 1])
}

fn check_alignment(
    what: &'static str,
    index: usize,
    seg: &Segment,
    expected: &std::ops::Range<usize>,
) -> Result<(), EnvelopeError> {
    if seg.start_frame != expected.start || seg.values.len() != expected.len() {
        return Err(EnvelopeError::GridMismatch {
            what,
            index,
            expected_start: expected.start,
            expected_end: expected.end,
            got_start: seg.start_frame,
            got_end: seg.start_frame + seg.values.len(),
        });
    }
    Ok(())
}

/// Weighted-sum assembly of per-dinote and per-mononote segments into one
/// track. Segments must be sampled on `grid` over exactly their envelope
/// support. Frames inside silent notes are marked unvoiced.
pub fn assemble(
    dinote_segments: &[Segment],
    mononote_segments: &[Segment],
    boundaries: &[f64],
    silent: &[bool],
    grid: &FrameGrid,
) -> Result<F0Track, EnvelopeError> {
    let n = silent.len();
    if n < 2 {
        return Err(EnvelopeError::TooFewNotes { got: n });
    }
    if boundaries.len() != n + 1 {
        return Err(EnvelopeError::LengthMismatch {
            what: "boundaries",
            expected: n + 1,
            got: boundaries.len(),
        });
    }
    if dinote_segments.len() != n {
        return Err(EnvelopeError::LengthMismatch {
            what: "dinote segments",
            expected: n,
            got: dinote_segments.len(),
        });
    }
    if mononote_segments.len() != n {
        return Err(EnvelopeError::LengthMismatch {
            what: "mononote segments",
            expected: n,
            got: mononote_segments.len(),
        });
    }
    for w in boundaries.windows(2) {
        if w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less) {
            return Err(EnvelopeError::NonMonotoneOnsets {
                context: format!("boundaries {} >= {}", w[0], w[1]),
            });
        }
    }

    let mut log_f0 = vec![0.0; grid.count];
    for (k, seg) in dinote_segments.iter().enumerate() {
        let support = dinote_support(grid, boundaries, k);
        check_alignment("dinote", k, seg, &support)?;
        for (j, f) in support.enumerate() {
            let t = grid.time(f);
            log_f0[f] += seg.values[j] * dinote_weight_at(boundaries, k, t);
        }
    }
    for (i, seg) in mononote_segments.iter().enumerate() {
        let support = mononote_support(grid, boundaries, i);
        check_alignment("mononote", i, seg, &support)?;
        for (j, f) in support.enumerate() {
            let t = grid.time(f);
            log_f0[f] += seg.values[j] * mononote_weight_at(boundaries, i, t);
        }
    }

    let voiced = (0..grid.count)
        .map(|f| !silent[containing_note(boundaries, grid.time(f))])
        .collect();
    Ok(F0Track {
        grid: *grid,
        log_f0,
        voiced,
    })
}

/// Index of the note whose span `[boundary_i, boundary_{i+1})` contains `t`,
/// clamped to the first/last note outside the score.
pub fn containing_note(boundaries: &[f64], t: f64) -> usize {
    let n = boundaries.len() - 1;
    let idx = boundaries.partition_point(|&b| b <= t);
    idx.saturating_sub(1).min(n - 1)
}
