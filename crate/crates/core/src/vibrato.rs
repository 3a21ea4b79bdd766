//! Per-note vibrato frequency and phase estimation from residual F0.
//!
//! The residual (target minus transition-only resynthesis) is analyzed note
//! by note: the note interior is trimmed to avoid transition leakage, the
//! longest contiguous voiced run is mean-removed, Hann-windowed, zero-padded
//! and transformed; the largest local spectral maximum inside the vibrato
//! search band gives the frequency after parabolic bin interpolation and a
//! local refinement of the windowed transform, and the phase is read from
//! the complex spectrum at the refined frequency. Peaks that fail a
//! prominence test (an absolute floor and a multiple of the in-band median)
//! are reported as not detected, so noise never gets fitted as vibrato.

use crate::envelope::F0Track;
use crate::score::Score;
use crate::sustain::wrap_angle;
use crate::transition::ModelError;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

/// Tunable analysis parameters. The defaults bracket human singing vibrato.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Search band in Hz.
    pub band_hz: (f64, f64),
    /// Zero-padding factor before the transform (rounded up to a power of
    /// two).
    pub zero_pad_factor: usize,
    /// Minimum contiguous voiced material needed for an estimate, seconds.
    pub min_voiced_seconds: f64,
    /// Fraction of the note duration trimmed from each side before analysis.
    pub interior_trim_fraction: f64,
    /// Absolute prominence floor, semitones.
    pub min_magnitude: f64,
    /// Peak must also exceed this multiple of the in-band median magnitude.
    pub median_factor: f64,
    /// Vibrato rate assumed when no note in a corpus yields an estimate, Hz.
    pub fallback_rate_hz: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            band_hz: (3.0, 8.0),
            zero_pad_factor: 4,
            min_voiced_seconds: 0.4,
            interior_trim_fraction: 0.10,
            min_magnitude: 0.05,
            median_factor: 3.0,
            fallback_rate_hz: 5.5,
        }
    }
}

/// Estimation result for one note. `omega`/`theta` are meaningful only when
/// `detected` is true; `theta` is referenced to the note's (corrected) onset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VibratoEstimate {
    pub note_index: usize,
    /// Angular frequency, rad/s.
    pub omega: f64,
    /// Phase at the note onset, rad.
    pub theta: f64,
    /// Peak amplitude, semitones.
    pub magnitude: f64,
    pub detected: bool,
}

/// Raw single-segment estimate; the phase is referenced to the segment start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentEstimate {
    pub omega: f64,
    pub theta: f64,
    pub magnitude: f64,
    pub detected: bool,
}

impl SegmentEstimate {
    fn none() -> SegmentEstimate {
        SegmentEstimate {
            omega: 0.0,
            theta: 0.0,
            magnitude: 0.0,
            detected: false,
        }
    }
}

/// Per-frame difference `target - synth` on frames voiced in both tracks;
/// other frames are zeroed and flagged unvoiced.
pub fn residual(target: &F0Track, synth: &F0Track) -> Result<F0Track, ModelError> {
    target.ensure_same_grid(synth)?;
    let voiced: Vec<bool> = target
        .voiced
        .iter()
        .zip(&synth.voiced)
        .map(|(a, b)| *a && *b)
        .collect();
    let log_f0 = (0..target.log_f0.len())
        .map(|f| {
            if voiced[f] {
                target.log_f0[f] - synth.log_f0[f]
            } else {
                0.0
            }
        })
        .collect();
    Ok(F0Track {
        grid: target.grid,
        log_f0,
        voiced,
    })
}

/// Windowed transform of `x` at a given per-sample angular increment.
fn dtft(x: &[f64], omega_per_sample: f64) -> Complex<f64> {
    let rot = Complex::from_polar(1.0, -omega_per_sample);
    let mut phase = Complex::new(1.0, 0.0);
    let mut acc = Complex::new(0.0, 0.0);
    for &v in x {
        acc += phase * v;
        phase *= rot;
    }
    acc
}

/// Peak-picking estimate over one contiguous residual segment.
///
/// Returns `detected = false` (never an error) when the segment is too short
/// or no sufficiently prominent in-band peak exists.
pub fn estimate_note(segment: &[f64], frame_period: f64, cfg: &EstimatorConfig) -> SegmentEstimate {
    let len = segment.len();
    if (len as f64) * frame_period < cfg.min_voiced_seconds || len < 4 {
        return SegmentEstimate::none();
    }

    let mean = segment.iter().sum::<f64>() / len as f64;
    let windowed: Vec<f64> = segment
        .iter()
        .enumerate()
        .map(|(n, &v)| {
            let w = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos());
            (v - mean) * w
        })
        .collect();
    let window_sum: f64 = (0..len)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos()))
        .sum();

    let n_fft = (len * cfg.zero_pad_factor.max(1)).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = windowed
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n_fft)
        .collect();
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);

    let fs = 1.0 / frame_period;
    let bin_hz = fs / n_fft as f64;
    let half = n_fft / 2;
    let k_lo = (cfg.band_hz.0 / bin_hz).ceil() as usize;
    let k_hi = ((cfg.band_hz.1 / bin_hz).floor() as usize).min(half);
    if k_lo >= k_hi || k_lo == 0 {
        return SegmentEstimate::none();
    }

    // Amplitude units: a sinusoid of amplitude A produces a peak of
    // A * window_sum / 2 in the raw magnitude spectrum.
    let amp = |k: usize| 2.0 * buf[k].norm() / window_sum;

    let mut best: Option<usize> = None;
    for k in k_lo..=k_hi {
        let m = buf[k].norm();
        let local_max =
            k >= 1 && k + 1 < buf.len() && m >= buf[k - 1].norm() && m >= buf[k + 1].norm();
        if local_max && best.is_none_or(|b| m > buf[b].norm()) {
            best = Some(k);
        }
    }
    let Some(peak) = best else {
        return SegmentEstimate::none();
    };

    // In-band floor for the prominence test: median magnitude outside the
    // peak's main lobe (width 4 fs / L for a Hann window). For segments so
    // short that the lobe fills the band, the absolute floor alone decides.
    let lobe_half_hz = 2.0 * fs / len as f64;
    let peak_hz_coarse = peak as f64 * bin_hz;
    let mut in_band: Vec<f64> = (k_lo..=k_hi)
        .filter(|&k| (k as f64 * bin_hz - peak_hz_coarse).abs() > lobe_half_hz)
        .map(amp)
        .collect();
    in_band.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if in_band.is_empty() {
        0.0
    } else {
        in_band[in_band.len() / 2]
    };

    // Parabolic interpolation on the log magnitude.
    let (l, c, r) = (
        buf[peak - 1].norm().max(1e-30).ln(),
        buf[peak].norm().max(1e-30).ln(),
        buf[peak + 1].norm().max(1e-30).ln(),
    );
    let denom = l - 2.0 * c + r;
    let shift = if denom.abs() > 1e-12 {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let coarse = (peak as f64 + shift) * bin_hz;

    // Refine by maximizing the windowed transform magnitude within half a
    // bin, staying inside the band.
    let per_sample = |hz: f64| 2.0 * std::f64::consts::PI * hz * frame_period;
    let mut lo_hz = (coarse - 0.5 * bin_hz).max(cfg.band_hz.0);
    let mut hi_hz = (coarse + 0.5 * bin_hz).min(cfg.band_hz.1);
    for _ in 0..60 {
        let m1 = lo_hz + (hi_hz - lo_hz) / 3.0;
        let m2 = hi_hz - (hi_hz - lo_hz) / 3.0;
        if dtft(&windowed, per_sample(m1)).norm_sqr() < dtft(&windowed, per_sample(m2)).norm_sqr() {
            lo_hz = m1;
        } else {
            hi_hz = m2;
        }
    }
    let hz = 0.5 * (lo_hz + hi_hz);
    let spectrum = dtft(&windowed, per_sample(hz));
    let magnitude = 2.0 * spectrum.norm() / window_sum;

    if !magnitude.is_finite() || magnitude < cfg.min_magnitude.max(cfg.median_factor * median) {
        return SegmentEstimate {
            omega: 0.0,
            theta: 0.0,
            magnitude,
            detected: false,
        };
    }

    // For A*sin(omega*t + theta) the positive-frequency component carries
    // exp(i(theta - pi/2)).
    let theta = wrap_angle(spectrum.arg() + std::f64::consts::FRAC_PI_2);
    SegmentEstimate {
        omega: 2.0 * std::f64::consts::PI * hz,
        theta,
        magnitude,
        detected: true,
    }
}

/// Shifts a segment-start phase back to the note onset.
pub fn rereference_theta(theta_seg: f64, omega: f64, seg_start: f64, onset: f64) -> f64 {
    wrap_angle(theta_seg - omega * (seg_start - onset))
}

/// Runs [`estimate_note`] over every note of a score against a residual
/// track. Notes that are silent, too short, or without a prominent peak get
/// `detected = false`. Phases are referenced to the corrected note onsets.
pub fn estimate_score(
    residual: &F0Track,
    score: &Score,
    offsets: Option<&[f64]>,
    cfg: &EstimatorConfig,
) -> Result<Vec<VibratoEstimate>, ModelError> {
    let boundaries = score.boundaries(offsets)?;
    let grid = &residual.grid;
    let mut out = Vec::with_capacity(score.len());
    for i in 0..score.len() {
        let undetected = VibratoEstimate {
            note_index: i,
            omega: 0.0,
            theta: 0.0,
            magnitude: 0.0,
            detected: false,
        };
        if score.notes[i].is_silent {
            out.push(undetected);
            continue;
        }
        let duration = boundaries[i + 1] - boundaries[i];
        let trim = cfg.interior_trim_fraction * duration;
        let frames = grid.frames_in(boundaries[i] + trim, boundaries[i + 1] - trim);
        let Some((run_start, run_values)) = longest_voiced_run(residual, frames) else {
            out.push(undetected);
            continue;
        };
        let est = estimate_note(run_values, grid.period, cfg);
        if est.detected {
            out.push(VibratoEstimate {
                note_index: i,
                omega: est.omega,
                theta: rereference_theta(est.theta, est.omega, grid.time(run_start), boundaries[i]),
                magnitude: est.magnitude,
                detected: true,
            });
        } else {
            out.push(VibratoEstimate {
                note_index: i,
                magnitude: est.magnitude,
                ..undetected
            });
        }
    }
    Ok(out)
}

/// Longest contiguous voiced run within a frame range, as
/// `(start_frame, values)`.
fn longest_voiced_run(track: &F0Track, frames: std::ops::Range<usize>) -> Option<(usize, &[f64])> {
    let mut best: Option<(usize, usize)> = None;
    let mut run_start = None;
    for f in frames.clone() {
        if track.voiced[f] {
            run_start.get_or_insert(f);
        } else if let Some(s) = run_start.take() {
            if best.is_none_or(|(bs, be)| f - s > be - bs) {
                best = Some((s, f));
            }
        }
    }
    if let Some(s) = run_start {
        let e = frames.end;
        if best.is_none_or(|(bs, be)| e - s > be - bs) {
            best = Some((s, e));
        }
    }
    best.map(|(s, e)| (s, &track.log_f0[s..e]))
}
