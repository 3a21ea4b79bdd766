//! Note-transition model: predicts log-F0 across pairs of neighboring notes.
//!
//! The network output rides on a residual connection carrying the second
//! note's pitch, so the network only learns the deviation shape around the
//! boundary. Per-note onset offsets are trained through the position input's
//! chain rule and hard-clamped to ±30 ms; they are training artifacts only —
//! synthesis on unseen scores runs with zero offsets.

use crate::envelope::{dinote_support, EnvelopeError, FrameGrid, Segment};
use crate::nn::{Mlp, NnError};
use crate::score::{Score, ScoreError, Standardizer, TransitionContext};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Hard bound on per-note onset corrections, in seconds.
pub const MAX_OFFSET_S: f64 = 0.030;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error("network input size {got} does not match the {expected}-dimensional context")]
    WrongInputSize { expected: usize, got: usize },
    #[error("{what} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
}

/// Transition network plus featurization scaling and the per-song onset
/// offsets learned during training (keyed by song id, one entry per note).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    pub mlp: Mlp,
    pub standardizer: Standardizer,
    #[serde(default)]
    pub offsets: BTreeMap<String, Vec<f64>>,
}

impl TransitionModel {
    pub fn new(mlp: Mlp, standardizer: Standardizer) -> Result<TransitionModel, ModelError> {
        if mlp.input_size() != TransitionContext::DIM
            || standardizer.dim() != TransitionContext::DIM
        {
            return Err(ModelError::WrongInputSize {
                expected: TransitionContext::DIM,
                got: mlp.input_size(),
            });
        }
        Ok(TransitionModel {
            mlp,
            standardizer,
            offsets: BTreeMap::new(),
        })
    }

    /// Standardized network input for dinote `i` at time `t`.
    pub fn input(
        &self,
        score: &Score,
        i: usize,
        t: f64,
        offsets: Option<&[f64]>,
    ) -> Result<[f64; TransitionContext::DIM], ModelError> {
        let ctx = score.transition_context(i, t, offsets)?;
        let mut x = ctx.0;
        self.standardizer.apply_in_place(&mut x)?;
        Ok(x)
    }

    /// Log-F0 prediction for dinote `i` at time `t`: network output plus the
    /// second note's pitch.
    pub fn predict_frame(
        &self,
        score: &Score,
        i: usize,
        t: f64,
        offsets: Option<&[f64]>,
    ) -> Result<f64, ModelError> {
        let x = self.input(score, i, t, offsets)?;
        Ok(self.mlp.forward(&x)? + score.residual_pitch(i))
    }

    /// Frame-wise prediction over dinote `i`'s envelope support.
    pub fn predict_dinote(
        &self,
        score: &Score,
        i: usize,
        grid: &FrameGrid,
        offsets: Option<&[f64]>,
    ) -> Result<Segment, ModelError> {
        let boundaries = score.boundaries(offsets)?;
        let frames = dinote_support(grid, &boundaries, i);
        let mut values = Vec::with_capacity(frames.len());
        for f in frames.clone() {
            values.push(self.predict_frame(score, i, grid.time(f), offsets)?);
        }
        Ok(Segment {
            start_frame: frames.start,
            values,
        })
    }

    /// The leading pseudo-dinote segment: the first real dinote's prediction
    /// at the score start, held constant over the frames before note 1's
    /// (corrected) onset fades in.
    pub fn pseudo_dinote(
        &self,
        score: &Score,
        grid: &FrameGrid,
        offsets: Option<&[f64]>,
    ) -> Result<Segment, ModelError> {
        let boundaries = score.boundaries(offsets)?;
        let frames = dinote_support(grid, &boundaries, 0);
        let t_eval = grid
            .start
            .clamp(boundaries[0], boundaries[boundaries.len().min(2) - 1]);
        let value = self.predict_frame(score, 1, t_eval, offsets)?;
        Ok(Segment::constant(frames, value))
    }

    /// Gradient of the loss with respect to note `i`'s onset offset, for one
    /// frame of dinote `i` with the given upstream `dL/d(prediction)`. Only
    /// the position feature depends on the offset
    /// (`position = t - onset_i - offset_i`); durations and envelope weights
    /// are treated as constants.
    pub fn offset_gradient(
        &self,
        score: &Score,
        i: usize,
        t: f64,
        offsets: Option<&[f64]>,
        upstream: f64,
    ) -> Result<f64, ModelError> {
        let x = self.input(score, i, t, offsets)?;
        let grads = self.mlp.backward(&x, upstream)?;
        Ok(self.position_gradient_to_offset(&grads.input))
    }

    /// Converts an accumulated standardized-input gradient into an offset
    /// gradient: unscale the position dimension and negate.
    pub fn position_gradient_to_offset(&self, input_grad: &[f64]) -> f64 {
        -input_grad[TransitionContext::POSITION_DIM]
            / self.standardizer.scale(TransitionContext::POSITION_DIM)
    }

    /// Clamps every stored offset to ±[`MAX_OFFSET_S`]. Idempotent.
    pub fn clamp_offsets(&mut self) {
        for offsets in self.offsets.values_mut() {
            clamp_offset_slice(offsets);
        }
    }
}

/// Clamps one offset array to ±[`MAX_OFFSET_S`] in place.
pub fn clamp_offset_slice(offsets: &mut [f64]) {
    for d in offsets.iter_mut() {
        *d = d.clamp(-MAX_OFFSET_S, MAX_OFFSET_S);
    }
}
