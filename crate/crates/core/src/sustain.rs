//! Sustain model: vibrato as an amplitude-modulated, phase-shifted,
//! time-warped sinusoid over each note interior.
//!
//! The network predicts only the time-varying vibrato depth (in semitones,
//! sign included — polarity is part of the fit). Each note carries a
//! pre-estimated angular frequency, a trainable phase shift, and two
//! trainable warp slopes controlling a cubic Hermite time warp on [0, 1]
//! that absorbs slow frequency disturbance. The trainable parameters receive
//! back-propagated gradients during training and fall back to defaults when
//! evaluating unseen scores.

use crate::envelope::{mononote_support, FrameGrid, Segment};
use crate::nn::{Gradients, Mlp};
use crate::score::{Score, ScoreError, Standardizer, SustainContext};
use crate::transition::ModelError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Admissible range of the warp slope parameters.
pub const WARP_SLOPE_MIN: f64 = 0.5;
pub const WARP_SLOPE_MAX: f64 = 2.0;

/// Conventional vibrato rate used when no estimate is available anywhere,
/// in Hz.
pub const FALLBACK_VIBRATO_RATE_HZ: f64 = 5.5;

/// Per-note vibrato parameters. `omega` is fixed after estimation;
/// `theta`, `alpha` and `beta` are trainable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteVibrato {
    /// Angular frequency, rad/s.
    pub omega: f64,
    /// Phase shift, rad.
    pub theta: f64,
    /// Warp slope at the note start.
    pub alpha: f64,
    /// Warp slope at the note end.
    pub beta: f64,
    /// Whether the estimator found a vibrato peak for this note.
    pub detected: bool,
}

/// Cubic Hermite warp on [0, 1] with fixed endpoints (0,0) and (1,1) and
/// endpoint slopes `alpha`, `beta`. Written so that `alpha = beta = 1`
/// collapses to the identity exactly in floating point.
pub fn warp(tau: f64, alpha: f64, beta: f64) -> Result<f64, ModelError> {
    check_warp_args(tau, alpha, beta)?;
    let t2 = tau * tau;
    let t3 = t2 * tau;
    Ok(tau + (t3 - 2.0 * t2 + tau) * (alpha - 1.0) + (t3 - t2) * (beta - 1.0))
}

/// Derivative of [`warp`] with respect to `tau`. Positive everywhere on
/// [0, 1] for slopes within the admissible range.
pub fn warp_derivative(tau: f64, alpha: f64, beta: f64) -> Result<f64, ModelError> {
    check_warp_args(tau, alpha, beta)?;
    let t2 = tau * tau;
    Ok(1.0 + (3.0 * t2 - 4.0 * tau + 1.0) * (alpha - 1.0) + (3.0 * t2 - 2.0 * tau) * (beta - 1.0))
}

fn check_warp_args(tau: f64, alpha: f64, beta: f64) -> Result<(), ModelError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(ModelError::OutOfRange {
            what: "tau",
            value: tau,
            lo: 0.0,
            hi: 1.0,
        });
    }
    for (what, v) in [("alpha", alpha), ("beta", beta)] {
        if !(WARP_SLOPE_MIN..=WARP_SLOPE_MAX).contains(&v) {
            return Err(ModelError::OutOfRange {
                what,
                value: v,
                lo: WARP_SLOPE_MIN,
                hi: WARP_SLOPE_MAX,
            });
        }
    }
    Ok(())
}

/// Depth network plus featurization scaling, synthesis defaults, and the
/// per-song per-note vibrato parameters learned during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SustainModel {
    pub mlp: Mlp,
    pub standardizer: Standardizer,
    /// Angular frequency used for notes without an estimate, rad/s.
    pub default_omega: f64,
    /// Phase used at synthesis on unseen scores, rad.
    pub default_theta: f64,
    #[serde(default)]
    pub note_params: BTreeMap<String, Vec<NoteVibrato>>,
}

/// Gradients of the loss with respect to one note's trainable vibrato
/// parameters, for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VibratoGrads {
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl SustainModel {
    pub fn new(mlp: Mlp, standardizer: Standardizer) -> Result<SustainModel, ModelError> {
        if mlp.input_size() != SustainContext::DIM || standardizer.dim() != SustainContext::DIM {
            return Err(ModelError::WrongInputSize {
                expected: SustainContext::DIM,
                got: mlp.input_size(),
            });
        }
        Ok(SustainModel {
            mlp,
            standardizer,
            default_omega: 2.0 * std::f64::consts::PI * FALLBACK_VIBRATO_RATE_HZ,
            default_theta: 0.0,
            note_params: BTreeMap::new(),
        })
    }

    /// Parameters used for notes of unseen scores: default frequency and
    /// phase, identity warp.
    pub fn default_params(&self) -> NoteVibrato {
        NoteVibrato {
            omega: self.default_omega,
            theta: self.default_theta,
            alpha: 1.0,
            beta: 1.0,
            detected: false,
        }
    }

    /// Standardized depth-network input for note `i` at time `t`.
    pub fn input(
        &self,
        score: &Score,
        i: usize,
        t: f64,
        offsets: Option<&[f64]>,
    ) -> Result<[f64; SustainContext::DIM], ModelError> {
        let ctx = score.sustain_context(i, t, offsets)?;
        let mut x = ctx.0;
        self.standardizer.apply_in_place(&mut x)?;
        Ok(x)
    }

    /// Vibrato depth prediction for note `i` at time `t`, in semitones.
    /// The output is linear and may be negative; the sign absorbs polarity.
    pub fn depth(
        &self,
        score: &Score,
        i: usize,
        t: f64,
        offsets: Option<&[f64]>,
    ) -> Result<f64, ModelError> {
        let x = self.input(score, i, t, offsets)?;
        Ok(self.mlp.forward(&x)?)
    }

    fn sinusoid(
        score: &Score,
        i: usize,
        t: f64,
        offsets: Option<&[f64]>,
        params: &NoteVibrato,
    ) -> Result<SinusoidParts, ModelError> {
        let n = score.len();
        if i >= n {
            return Err(ScoreError::IndexOutOfRange {
                index: i,
                len: n,
                what: "mononote",
            }
            .into());
        }
        let off = |j: usize| offsets.map_or(0.0, |o| o[j]);
        let lo = score.notes[i].onset + off(i);
        let hi = if i + 1 < n {
            score.notes[i + 1].onset + off(i + 1)
        } else {
            score.end()
        };
        let duration = hi - lo;
        let tau = ((t - lo) / duration).clamp(0.0, 1.0);
        let phi = warp(tau, params.alpha, params.beta)?;
        let phase = params.omega * phi * duration + params.theta;
        Ok(SinusoidParts {
            tau,
            duration,
            sin: phase.sin(),
            cos: phase.cos(),
        })
    }

    /// The mononote deviation `depth * sin(omega * warp(tau) * duration + theta)`
    /// for note `i` at time `t`, in semitones.
    pub fn mononote_value(
        &self,
        score: &Score,
        i: usize,
        t: f64,
        offsets: Option<&[f64]>,
        params: &NoteVibrato,
    ) -> Result<f64, ModelError> {
        let depth = self.depth(score, i, t, offsets)?;
        let parts = Self::sinusoid(score, i, t, offsets, params)?;
        Ok(depth * parts.sin)
    }

    /// Frame-wise mononote values over note `i`'s envelope support.
    pub fn mononote_segment(
        &self,
        score: &Score,
        i: usize,
        grid: &FrameGrid,
        offsets: Option<&[f64]>,
        params: &NoteVibrato,
    ) -> Result<Segment, ModelError> {
        let boundaries = score.boundaries(offsets)?;
        let frames = mononote_support(grid, &boundaries, i);
        let mut values = Vec::with_capacity(frames.len());
        for f in frames.clone() {
            values.push(self.mononote_value(score, i, grid.time(f), offsets, params)?);
        }
        Ok(Segment {
            start_frame: frames.start,
            values,
        })
    }

    /// Analytic gradients of `upstream * mononote_value` with respect to the
    /// trainable vibrato parameters; the depth network's gradients for the
    /// same frame are accumulated into `net_acc`.
    #[allow(clippy::too_many_arguments)]
    pub fn vibrato_param_gradients(
        &self,
        score: &Score,
        i: usize,
        t: f64,
        offsets: Option<&[f64]>,
        params: &NoteVibrato,
        upstream: f64,
        net_acc: &mut Gradients,
    ) -> Result<VibratoGrads, ModelError> {
        let x = self.input(score, i, t, offsets)?;
        let depth = self.mlp.forward(&x)?;
        let parts = Self::sinusoid(score, i, t, offsets, params)?;
        self.mlp
            .backward_accumulate(&x, upstream * parts.sin, net_acc, None)?;
        let tau = parts.tau;
        let t2 = tau * tau;
        let t3 = t2 * tau;
        let dphi_dalpha = t3 - 2.0 * t2 + tau;
        let dphi_dbeta = t3 - t2;
        let common = upstream * depth * parts.cos;
        Ok(VibratoGrads {
            theta: common,
            alpha: common * params.omega * parts.duration * dphi_dalpha,
            beta: common * params.omega * parts.duration * dphi_dbeta,
        })
    }

    /// Clamps every stored warp slope into the admissible range. Idempotent.
    pub fn clamp_warp(&mut self) {
        for params in self.note_params.values_mut() {
            clamp_warp_slice(params);
        }
    }
}

/// Clamps one note-parameter array's warp slopes in place.
pub fn clamp_warp_slice(params: &mut [NoteVibrato]) {
    for p in params.iter_mut() {
        p.alpha = p.alpha.clamp(WARP_SLOPE_MIN, WARP_SLOPE_MAX);
        p.beta = p.beta.clamp(WARP_SLOPE_MIN, WARP_SLOPE_MAX);
    }
}

/// Wraps an angle to (-pi, pi]. Applied to phases at serialization time;
/// the phase itself is periodic and unbounded during training.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = theta % two_pi;
    if t <= -std::f64::consts::PI {
        t += two_pi;
    } else if t > std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

struct SinusoidParts {
    tau: f64,
    duration: f64,
    sin: f64,
    cos: f64,
}
