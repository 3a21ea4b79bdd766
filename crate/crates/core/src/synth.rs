//! Full-score synthesis: model segments plus envelope assembly.

use crate::envelope::{assemble, F0Track, FrameGrid, Segment};
use crate::score::Score;
use crate::sustain::{NoteVibrato, SustainModel};
use crate::transition::{ModelError, TransitionModel};

/// How the sustain model contributes at synthesis time.
#[derive(Debug, Clone, Copy)]
pub enum VibratoMode<'a> {
    /// Zero out the mononote sum entirely.
    Disabled,
    /// Default per-note parameters (unseen-score evaluation).
    Defaults,
    /// Explicit per-note parameters (training-time evaluation).
    PerNote(&'a [NoteVibrato]),
}

/// The frame grid implied by a score: from the first onset to the last
/// note's end at the score's frame period.
pub fn score_grid(score: &Score) -> FrameGrid {
    FrameGrid::for_span(score.start(), score.end(), score.frame_period)
}

/// Synthesizes the full trajectory for a score: transition segments for
/// every dinote (including the leading constant pseudo-dinote) plus
/// mononote segments per the vibrato mode, combined by enveloped summation.
pub fn synthesize(
    transition: &TransitionModel,
    sustain: &SustainModel,
    score: &Score,
    offsets: Option<&[f64]>,
    vibrato: VibratoMode,
) -> Result<F0Track, ModelError> {
    let grid = score_grid(score);
    let boundaries = score.boundaries(offsets)?;
    let n = score.len();

    let mut dinotes = Vec::with_capacity(n);
    dinotes.push(transition.pseudo_dinote(score, &grid, offsets)?);
    for i in 1..n {
        dinotes.push(transition.predict_dinote(score, i, &grid, offsets)?);
    }

    let mut mononotes = Vec::with_capacity(n);
    for i in 0..n {
        let seg = match vibrato {
            VibratoMode::Disabled => Segment::constant(
                crate::envelope::mononote_support(&grid, &boundaries, i),
                0.0,
            ),
            VibratoMode::Defaults => {
                sustain.mononote_segment(score, i, &grid, offsets, &sustain.default_params())?
            }
            VibratoMode::PerNote(params) => {
                sustain.mononote_segment(score, i, &grid, offsets, &params[i])?
            }
        };
        mononotes.push(seg);
    }

    let silent: Vec<bool> = score.notes.iter().map(|n| n.is_silent).collect();
    Ok(assemble(&dinotes, &mononotes, &boundaries, &silent, &grid)?)
}

/// Transition-only resynthesis (the sustain contribution substituted as
/// zero), as used for residual extraction.
pub fn synthesize_transition_only(
    transition: &TransitionModel,
    sustain: &SustainModel,
    score: &Score,
    offsets: Option<&[f64]>,
) -> Result<F0Track, ModelError> {
    synthesize(transition, sustain, score, offsets, VibratoMode::Disabled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mlp};
    use crate::score::{Note, OnsetType, Standardizer};
    use crate::sustain::SustainModel;
    use crate::transition::TransitionModel;

    fn score_from(notes: &[(f64, f64, bool)]) -> Score {
        let mut onset = 0.0;
        let mut out = Vec::new();
        for &(dur, pitch, silent) in notes {
            out.push(Note {
                onset,
                duration: dur,
                pitch,
                is_silent: silent,
                onset_type: OnsetType::Default,
            });
            onset += dur;
        }
        Score {
            notes: out,
            frame_period: 0.005,
        }
    }

    fn identity_std(dim: usize, real: &[usize]) -> Standardizer {
        let mut scaled = vec![false; dim];
        for &d in real {
            scaled[d] = true;
        }
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            scaled,
        }
    }

    fn zero_models() -> (TransitionModel, SustainModel) {
        let mut tm = Mlp::init(&[9, 4, 1], Activation::Tanh, 0).unwrap();
        tm.set_params_flat(&vec![0.0; tm.param_count()]).unwrap();
        let mut sm = Mlp::init(&[11, 4, 1], Activation::Tanh, 1).unwrap();
        sm.set_params_flat(&vec![0.0; sm.param_count()]).unwrap();
        (
            TransitionModel::new(tm, identity_std(9, &[0, 1, 2, 8])).unwrap(),
            SustainModel::new(sm, identity_std(11, &[0, 3, 4, 5, 9, 10])).unwrap(),
        )
    }

    #[test]
    fn zero_network_synthesis_interpolates_pitches_linearly() {
        let (tm, sm) = zero_models();
        let s = score_from(&[
            (1.0, 0.0, true),
            (1.0, 60.0, false),
            (1.0, 64.0, false),
            (1.0, 0.0, true),
        ]);
        let track = synthesize(&tm, &sm, &s, None, VibratoMode::Defaults).unwrap();
        let grid = track.grid;
        for f in 0..grid.count {
            let t = grid.time(f);
            let expected = if t <= 1.0 {
                60.0
            } else if t <= 2.0 {
                60.0 + 4.0 * (t - 1.0) // cross-fade between note pitches
            } else if t <= 3.0 {
                64.0
            } else {
                continue; // trailing fade, unvoiced
            };
            assert!(
                (track.log_f0[f] - expected).abs() < 1e-9,
                "t={t}: {} vs {expected}",
                track.log_f0[f]
            );
        }
    }

    #[test]
    fn frame_count_follows_the_grid_rule() {
        let (tm, sm) = zero_models();
        let s = score_from(&[(0.5, 0.0, true), (0.8, 62.0, false), (0.5, 0.0, true)]);
        let track = synthesize(&tm, &sm, &s, None, VibratoMode::Disabled).unwrap();
        assert_eq!(track.grid.count, (1.8f64 / 0.005).round() as usize);
        assert_eq!(track.log_f0.len(), track.grid.count);
    }

    #[test]
    fn disabled_vibrato_subtracts_the_mononote_sum() {
        let (tm, mut sm) = zero_models();
        // Give the sustain net a constant nonzero depth.
        let n = sm.mlp.biases.len();
        sm.mlp.biases[n - 1][0] = 0.4;
        let s = score_from(&[(1.0, 0.0, true), (1.5, 62.0, false), (1.0, 0.0, true)]);
        let full = synthesize(&tm, &sm, &s, None, VibratoMode::Defaults).unwrap();
        let bare = synthesize(&tm, &sm, &s, None, VibratoMode::Disabled).unwrap();
        let boundaries = s.boundaries(None).unwrap();
        let grid = full.grid;
        let params = sm.default_params();
        for f in 0..grid.count {
            let t = grid.time(f);
            let i = crate::envelope::containing_note(&boundaries, t);
            let mono = sm.mononote_value(&s, i, t, None, &params).unwrap()
                * crate::envelope::mononote_weight_at(&boundaries, i, t);
            assert!(
                (full.log_f0[f] - bare.log_f0[f] - mono).abs() < 1e-9,
                "frame {f}"
            );
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let (tm, sm) = zero_models();
        let s = score_from(&[(1.0, 0.0, true), (1.0, 62.0, false), (1.0, 0.0, true)]);
        let a = synthesize(&tm, &sm, &s, None, VibratoMode::Defaults).unwrap();
        let b = synthesize(&tm, &sm, &s, None, VibratoMode::Defaults).unwrap();
        assert_eq!(a, b);
    }
}
