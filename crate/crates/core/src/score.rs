//! Note-level score data model and network-input featurization.
//!
//! A [`Score`] is an ordered, contiguous run of [`Note`] events on a fixed
//! frame grid. Scores are converted into fixed-layout context vectors:
//! [`TransitionContext`] (9 dims) describes a pair of neighboring notes at a
//! time position, [`SustainContext`] (11 dims) describes the sustained
//! interior of a single note. Real-valued dimensions are standardized by
//! training-set statistics ([`Standardizer`]); flags and one-hot dimensions
//! pass through untouched.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Contiguity tolerance between a note's end and the next onset, in seconds.
pub const CONTIGUITY_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("note index {index} out of range for {what} (score has {len} notes)")]
    IndexOutOfRange {
        index: usize,
        len: usize,
        what: &'static str,
    },
    #[error("time {t} s outside the support [{lo}, {hi}] s of {what} {index}")]
    TimeOutOfSupport {
        t: f64,
        lo: f64,
        hi: f64,
        what: &'static str,
        index: usize,
    },
    #[error("offset array has length {got}, score has {expected} notes")]
    OffsetLengthMismatch { got: usize, expected: usize },
    #[error("cannot fit a standardizer on an empty collection")]
    EmptyFit,
    #[error("standardizer dimension {expected} does not match vector length {got}")]
    DimMismatch { expected: usize, got: usize },
}

/// How a note's onset is articulated. One-hot encoded in context vectors,
/// in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnsetType {
    Legato,
    VowelLeading,
    Default,
}

impl OnsetType {
    fn one_hot(self) -> [f64; 3] {
        match self {
            OnsetType::Legato => [1.0, 0.0, 0.0],
            OnsetType::VowelLeading => [0.0, 1.0, 0.0],
            OnsetType::Default => [0.0, 0.0, 1.0],
        }
    }
}

/// A single note event. Pitch is on the MIDI scale,
/// `p = 69 + 12 log2(f / 440)`; silent notes (rests) carry a pitch field but
/// featurization never reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Note {
    /// Onset time in seconds.
    pub onset: f64,
    /// Duration in seconds; must be positive.
    pub duration: f64,
    /// Pitch in MIDI semitones (real-valued).
    pub pitch: f64,
    /// Rest marker.
    #[serde(rename = "silent")]
    pub is_silent: bool,
    pub onset_type: OnsetType,
}

impl Note {
    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }
}

fn default_frame_period() -> f64 {
    0.005
}

/// An ordered, contiguous sequence of notes bracketed by silence.
///
/// Invariants (checked by [`Score::validate`], not silently repaired):
/// onsets strictly increase and each note ends where the next begins; the
/// first and last notes are silent; there are at least two notes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Score {
    pub notes: Vec<Note>,
    /// Frame grid period in seconds (default 5 ms).
    #[serde(default = "default_frame_period")]
    pub frame_period: f64,
}

/// A single validation diagnostic: which note, which rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub note_index: usize,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "note {}: {}", self.note_index, self.rule)
    }
}

impl Score {
    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// End of the score: the last note's end, in seconds.
    pub fn end(&self) -> f64 {
        self.notes.last().map_or(0.0, Note::end)
    }

    /// Start of the score: the first note's onset, in seconds.
    pub fn start(&self) -> f64 {
        self.notes.first().map_or(0.0, |n| n.onset)
    }

    /// Checks every score invariant and returns the violations found.
    /// An empty list means the score is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.notes.len();
        if n < 2 {
            out.push(Violation {
                note_index: 0,
                rule: format!("score has {n} notes, need at least 2"),
            });
            return out;
        }
        if !(self.frame_period > 0.0 && self.frame_period.is_finite()) {
            out.push(Violation {
                note_index: 0,
                rule: format!("frame_period {} must be positive", self.frame_period),
            });
        }
        for (i, note) in self.notes.iter().enumerate() {
            if !(note.duration > 0.0 && note.duration.is_finite()) {
                out.push(Violation {
                    note_index: i,
                    rule: format!("duration {} must be positive", note.duration),
                });
            }
            if !note.onset.is_finite() || (i == 0 && note.onset < 0.0) {
                out.push(Violation {
                    note_index: i,
                    rule: format!("onset {} must be finite and non-negative", note.onset),
                });
            }
            if !note.is_silent && !note.pitch.is_finite() {
                out.push(Violation {
                    note_index: i,
                    rule: format!("pitch {} must be finite on non-silent notes", note.pitch),
                });
            }
        }
        for i in 1..n {
            let prev = &self.notes[i - 1];
            let cur = &self.notes[i];
            if cur.onset <= prev.onset {
                out.push(Violation {
                    note_index: i,
                    rule: "onsets must be strictly increasing".to_string(),
                });
            }
            let gap = cur.onset - prev.end();
            if gap.abs() > CONTIGUITY_EPS {
                out.push(Violation {
                    note_index: i,
                    rule: format!(
                        "notes must be contiguous: previous note ends at {} s, this onset is {} s",
                        prev.end(),
                        cur.onset
                    ),
                });
            }
        }
        if !self.notes[0].is_silent {
            out.push(Violation {
                note_index: 0,
                rule: "first note must be silent".to_string(),
            });
        }
        if !self.notes[n - 1].is_silent {
            out.push(Violation {
                note_index: n - 1,
                rule: "last note must be silent".to_string(),
            });
        }
        out
    }

    /// Corrected note boundaries: onsets shifted by per-note offsets, plus the
    /// score end as a final entry (length `notes.len() + 1`). The end never
    /// carries an offset.
    pub fn boundaries(&self, offsets: Option<&[f64]>) -> Result<Vec<f64>, ScoreError> {
        if let Some(o) = offsets {
            if o.len() != self.notes.len() {
                return Err(ScoreError::OffsetLengthMismatch {
                    got: o.len(),
                    expected: self.notes.len(),
                });
            }
        }
        let mut b: Vec<f64> = self
            .notes
            .iter()
            .enumerate()
            .map(|(i, n)| n.onset + offsets.map_or(0.0, |o| o[i]))
            .collect();
        b.push(self.end());
        Ok(b)
    }

    fn offset(&self, offsets: Option<&[f64]>, i: usize) -> f64 {
        offsets.map_or(0.0, |o| o[i])
    }

    /// Pitch interval `second - first` in semitones, zero whenever either
    /// note is silent (the silence flags carry that information instead).
    pub fn pitch_interval(&self, first: usize, second: usize) -> f64 {
        let a = &self.notes[first];
        let b = &self.notes[second];
        if a.is_silent || b.is_silent {
            0.0
        } else {
            b.pitch - a.pitch
        }
    }

    /// Effective pitch of note `i` under the silent-note rule: silent notes
    /// borrow the pitch of the nearest non-silent note (preferring earlier
    /// ones), so rests never inject arbitrary pitch values.
    pub fn effective_pitch(&self, i: usize) -> f64 {
        if !self.notes[i].is_silent {
            return self.notes[i].pitch;
        }
        for d in 1..self.notes.len() {
            if i >= d && !self.notes[i - d].is_silent {
                return self.notes[i - d].pitch;
            }
            if i + d < self.notes.len() && !self.notes[i + d].is_silent {
                return self.notes[i + d].pitch;
            }
        }
        0.0
    }

    /// Pitch added back onto the transition network's output for the dinote
    /// ending at note `i`: the second note's pitch, resolved through the
    /// silent-note rule (a silent second note borrows the first note's pitch,
    /// then the nearest non-silent pitch).
    pub fn residual_pitch(&self, i: usize) -> f64 {
        let second = &self.notes[i];
        if !second.is_silent {
            return second.pitch;
        }
        if i >= 1 && !self.notes[i - 1].is_silent {
            return self.notes[i - 1].pitch;
        }
        self.effective_pitch(i)
    }

    /// Builds the transition-model input for the dinote spanning notes
    /// `i - 1` and `i`, at time `t`. Offsets shift the note boundaries; the
    /// position feature is measured from the corrected boundary of note `i`.
    pub fn transition_context(
        &self,
        i: usize,
        t: f64,
        offsets: Option<&[f64]>,
    ) -> Result<TransitionContext, ScoreError> {
        let n = self.notes.len();
        if i < 1 || i >= n {
            return Err(ScoreError::IndexOutOfRange {
                index: i,
                len: n,
                what: "dinote",
            });
        }
        if let Some(o) = offsets {
            if o.len() != n {
                return Err(ScoreError::OffsetLengthMismatch {
                    got: o.len(),
                    expected: n,
                });
            }
        }
        let first = &self.notes[i - 1];
        let second = &self.notes[i];
        let lo = first.onset + self.offset(offsets, i - 1);
        let hi = if i + 1 < n {
            self.notes[i + 1].onset + self.offset(offsets, i + 1)
        } else {
            self.end()
        };
        if t < lo - SUPPORT_EPS || t > hi + SUPPORT_EPS {
            return Err(ScoreError::TimeOutOfSupport {
                t,
                lo,
                hi,
                what: "dinote",
                index: i,
            });
        }
        let boundary = second.onset + self.offset(offsets, i);
        let one_hot = second.onset_type.one_hot();
        Ok(TransitionContext([
            first.duration,
            second.duration,
            self.pitch_interval(i - 1, i),
            if first.is_silent { 1.0 } else { 0.0 },
            if second.is_silent { 1.0 } else { 0.0 },
            one_hot[0],
            one_hot[1],
            one_hot[2],
            t - boundary,
        ]))
    }

    /// Builds the sustain-model input for the mononote of note `i` at time
    /// `t`. Forward/backward positions are measured from the corrected note
    /// boundaries; neighbors off the ends of the score count as silent.
    pub fn sustain_context(
        &self,
        i: usize,
        t: f64,
        offsets: Option<&[f64]>,
    ) -> Result<SustainContext, ScoreError> {
        let n = self.notes.len();
        if i >= n {
            return Err(ScoreError::IndexOutOfRange {
                index: i,
                len: n,
                what: "mononote",
            });
        }
        if let Some(o) = offsets {
            if o.len() != n {
                return Err(ScoreError::OffsetLengthMismatch {
                    got: o.len(),
                    expected: n,
                });
            }
        }
        let note = &self.notes[i];
        let lo = note.onset + self.offset(offsets, i);
        let hi = if i + 1 < n {
            self.notes[i + 1].onset + self.offset(offsets, i + 1)
        } else {
            self.end()
        };
        if t < lo - SUPPORT_EPS || t > hi + SUPPORT_EPS {
            return Err(ScoreError::TimeOutOfSupport {
                t,
                lo,
                hi,
                what: "mononote",
                index: i,
            });
        }
        let prev_silent = i == 0 || self.notes[i - 1].is_silent;
        let next_silent = i + 1 >= n || self.notes[i + 1].is_silent;
        let diff_prev = if i == 0 {
            0.0
        } else {
            self.pitch_interval(i, i - 1)
        };
        let diff_next = if i + 1 >= n {
            0.0
        } else {
            self.pitch_interval(i, i + 1)
        };
        let one_hot = note.onset_type.one_hot();
        Ok(SustainContext([
            note.duration,
            if prev_silent { 1.0 } else { 0.0 },
            if next_silent { 1.0 } else { 0.0 },
            self.effective_pitch(i),
            diff_prev,
            diff_next,
            one_hot[0],
            one_hot[1],
            one_hot[2],
            t - lo,
            hi - t,
        ]))
    }
}

/// Slack admitted when checking that a time lies inside a segment's support,
/// in seconds. Covers frame rounding at segment edges.
pub const SUPPORT_EPS: f64 = 1e-6;

/// Transition-model input: durations of the pair, pitch interval, silence
/// flags, the second note's onset-type one-hot, and the position relative to
/// the (corrected) note boundary, negative inside the first note.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionContext(pub [f64; 9]);

impl TransitionContext {
    pub const DIM: usize = 9;
    /// Dimensions that are real-valued and subject to standardization.
    pub const REAL_DIMS: [usize; 4] = [0, 1, 2, 8];
    pub const POSITION_DIM: usize = 8;

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Sustain-model input: mononote duration, neighbor silence flags, pitch,
/// signed pitch differences to the neighbors (`neighbor - this`), the note's
/// onset-type one-hot, and forward/backward positions inside the note.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SustainContext(pub [f64; 11]);

impl SustainContext {
    pub const DIM: usize = 11;
    pub const REAL_DIMS: [usize; 6] = [0, 3, 4, 5, 9, 10];

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Per-dimension affine scaling fitted on training data. Only the dimensions
/// listed at fit time are scaled; flags and one-hot entries pass through.
/// Zero-variance dimensions keep their mean but get unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Which dimensions are standardized.
    pub scaled: Vec<bool>,
}

impl Standardizer {
    /// Fits per-dimension mean and (population) standard deviation over the
    /// given vectors, for the listed real dimensions only.
    pub fn fit<'a, I>(vectors: I, dim: usize, real_dims: &[usize]) -> Result<Self, ScoreError>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut count = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for v in vectors {
            if v.len() != dim {
                return Err(ScoreError::DimMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            count += 1;
            let k = count as f64;
            for d in 0..dim {
                let delta = v[d] - mean[d];
                mean[d] += delta / k;
                m2[d] += delta * (v[d] - mean[d]);
            }
        }
        if count == 0 {
            return Err(ScoreError::EmptyFit);
        }
        let mut scaled = vec![false; dim];
        for &d in real_dims {
            scaled[d] = true;
        }
        let mut std = vec![1.0; dim];
        for d in 0..dim {
            if scaled[d] {
                let var = m2[d] / count as f64;
                let s = var.sqrt();
                std[d] = if s > 0.0 { s } else { 1.0 };
            } else {
                mean[d] = 0.0;
            }
        }
        Ok(Standardizer { mean, std, scaled })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes `x` in place.
    pub fn apply_in_place(&self, x: &mut [f64]) -> Result<(), ScoreError> {
        if x.len() != self.mean.len() {
            return Err(ScoreError::DimMismatch {
                expected: self.mean.len(),
                got: x.len(),
            });
        }
        for (d, v) in x.iter_mut().enumerate() {
            if self.scaled[d] {
                *v = (*v - self.mean[d]) / self.std[d];
            }
        }
        Ok(())
    }

    /// Standardizes a copy of `x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, ScoreError> {
        let mut out = x.to_vec();
        self.apply_in_place(&mut out)?;
        Ok(out)
    }

    /// Scale of one dimension: `std` if the dimension is standardized,
    /// otherwise 1. The derivative of the standardized value with respect to
    /// the raw value is `1 / scale`.
    pub fn scale(&self, dim: usize) -> f64 {
        if self.scaled[dim] {
            self.std[dim]
        } else {
            1.0
        }
    }
}
