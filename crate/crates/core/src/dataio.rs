//! Corpus loading, model serialization, and the synthetic corpus generator.
//!
//! File formats:
//! - Score: JSON (see [`crate::score::Score`]); unknown fields rejected.
//! - F0 track: plain text, one `time_s<TAB>f0_hz` line per frame, `0` Hz
//!   meaning unvoiced.
//! - Model: versioned JSON carrying both models, the training config and
//!   seed.
//!
//! Pitch lives in MIDI semitones everywhere else in the crate; the Hz
//! conversion happens only here.

use crate::envelope::{assemble, dinote_support, mononote_support, F0Track, FrameGrid, Segment};
use crate::nn::unit_f64;
use crate::score::{Note, OnsetType, Score};
use crate::sustain::{wrap_angle, SustainModel};
use crate::synth::score_grid;
use crate::train::TrainConfig;
use crate::transition::{ModelError, TransitionModel};
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Version tag written into model files.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: invalid score: {violations}")]
    InvalidScore { path: PathBuf, violations: String },
    #[error("score and f0 path lists differ in length: {scores} vs {f0}")]
    PathListMismatch { scores: usize, f0: usize },
    #[error("song {id}: f0 grid (start {got_start}, count {got_count}, period {got_period}) does not match the score grid (start {want_start}, count {want_count}, period {want_period})")]
    GridMismatch {
        id: String,
        got_start: f64,
        got_count: usize,
        got_period: f64,
        want_start: f64,
        want_count: usize,
        want_period: f64,
    },
    #[error("duplicate song id {id}")]
    DuplicateId { id: String },
    #[error("{path}: format version {found}, this build reads version {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: i64,
        expected: u32,
    },
    #[error("{path}: schema error: {reason}")]
    Schema { path: PathBuf, reason: String },
    #[error("synthetic spec invalid: {reason}")]
    BadSpec { reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// MIDI-scale semitones from Hz: `69 + 12 log2(f / 440)`.
pub fn hz_to_semitone(hz: f64) -> f64 {
    69.0 + 12.0 * (hz / 440.0).log2()
}

/// Hz from MIDI-scale semitones.
pub fn semitone_to_hz(semitone: f64) -> f64 {
    440.0 * ((semitone - 69.0) / 12.0).exp2()
}

// ---------------------------------------------------------------------------
// Score files

pub fn read_score(path: &Path) -> Result<Score, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let score: Score = serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    let violations = score.validate();
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(DataError::InvalidScore {
            path: path.to_path_buf(),
            violations: list.join("; "),
        });
    }
    Ok(score)
}

pub fn write_score(path: &Path, score: &Score) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(score).expect("score serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// F0 track files

/// Renders a track in the `time_s<TAB>f0_hz` text format. Unvoiced frames
/// are written as 0 Hz.
pub fn format_f0_track(track: &F0Track) -> String {
    let mut out = String::new();
    for f in 0..track.grid.count {
        let t = track.grid.time(f);
        let hz = if track.voiced[f] {
            semitone_to_hz(track.log_f0[f])
        } else {
            0.0
        };
        out.push_str(&format!("{t}\t{hz}\n"));
    }
    out
}

pub fn write_f0_track(path: &Path, track: &F0Track) -> Result<(), DataError> {
    std::fs::write(path, format_f0_track(track)).map_err(io_err(path))
}

/// Parses the text format. Times must form a uniform grid (within 1 ns);
/// 0 Hz marks unvoiced frames, which carry a log-F0 of 0.
pub fn parse_f0_track(text: &str, path: &Path) -> Result<F0Track, DataError> {
    let mut times = Vec::new();
    let mut hz_values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| DataError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason,
        };
        let mut parts = line.split('\t');
        let t: f64 = parts
            .next()
            .ok_or_else(|| err("missing time field".into()))?
            .parse()
            .map_err(|e| err(format!("bad time: {e}")))?;
        let hz: f64 = parts
            .next()
            .ok_or_else(|| err("missing f0_hz field".into()))?
            .parse()
            .map_err(|e| err(format!("bad f0_hz: {e}")))?;
        if parts.next().is_some() {
            return Err(err("expected exactly two tab-separated fields".into()));
        }
        if !t.is_finite() || !hz.is_finite() || hz < 0.0 {
            return Err(err(format!("non-finite or negative values: {t} {hz}")));
        }
        times.push(t);
        hz_values.push(hz);
    }
    if times.len() < 2 {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: times.len(),
            reason: format!("need at least 2 frames, got {}", times.len()),
        });
    }
    let start = times[0];
    let period = times[1] - times[0];
    if period.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: 2,
            reason: format!(
                "non-increasing frame times ({} then {})",
                times[0], times[1]
            ),
        });
    }
    for (k, &t) in times.iter().enumerate() {
        let expected = start + k as f64 * period;
        if (t - expected).abs() > 1e-9 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                reason: format!("non-uniform frame time {t}, expected {expected}"),
            });
        }
    }
    let voiced: Vec<bool> = hz_values.iter().map(|&hz| hz > 0.0).collect();
    let log_f0: Vec<f64> = hz_values
        .iter()
        .map(|&hz| if hz > 0.0 { hz_to_semitone(hz) } else { 0.0 })
        .collect();
    Ok(F0Track {
        grid: FrameGrid {
            start,
            count: times.len(),
            period,
        },
        log_f0,
        voiced,
    })
}

pub fn read_f0_track(path: &Path) -> Result<F0Track, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_f0_track(&text, path)
}

// ---------------------------------------------------------------------------
// Corpus

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub score: Score,
    pub target: F0Track,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Checks song-id uniqueness, score validity, and grid agreement between
    /// each score and its target track.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = std::collections::BTreeSet::new();
        for item in &self.items {
            if !seen.insert(&item.id) {
                return Err(DataError::DuplicateId {
                    id: item.id.clone(),
                });
            }
            let violations = item.score.validate();
            if !violations.is_empty() {
                let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                return Err(DataError::InvalidScore {
                    path: PathBuf::from(&item.id),
                    violations: list.join("; "),
                });
            }
            let want = score_grid(&item.score);
            if item.target.grid != want {
                let got = item.target.grid;
                return Err(DataError::GridMismatch {
                    id: item.id.clone(),
                    got_start: got.start,
                    got_count: got.count,
                    got_period: got.period,
                    want_start: want.start,
                    want_count: want.count,
                    want_period: want.period,
                });
            }
        }
        Ok(())
    }
}

/// Loads parallel score/f0 file lists into a validated corpus. Song ids are
/// the score file stems. Small numeric noise in the parsed frame times is
/// canonicalized onto the score's exact grid.
pub fn load_corpus(score_paths: &[PathBuf], f0_paths: &[PathBuf]) -> Result<Corpus, DataError> {
    if score_paths.len() != f0_paths.len() {
        return Err(DataError::PathListMismatch {
            scores: score_paths.len(),
            f0: f0_paths.len(),
        });
    }
    let mut items = Vec::with_capacity(score_paths.len());
    for (sp, fp) in score_paths.iter().zip(f0_paths) {
        let score = read_score(sp)?;
        let mut target = read_f0_track(fp)?;
        let id = sp
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| sp.to_string_lossy().into_owned());
        let id = id.trim_end_matches(".score").to_string();
        let want = score_grid(&score);
        let got = target.grid;
        let close = got.count == want.count
            && (got.start - want.start).abs() <= 1e-9
            && (got.period - want.period).abs() <= 1e-9;
        if !close {
            return Err(DataError::GridMismatch {
                id,
                got_start: got.start,
                got_count: got.count,
                got_period: got.period,
                want_start: want.start,
                want_count: want.count,
                want_period: want.period,
            });
        }
        target.grid = want;
        items.push(CorpusItem { id, score, target });
    }
    let corpus = Corpus { items };
    corpus.validate()?;
    Ok(corpus)
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation

/// Parameters of the synthetic ground-truth generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub songs: usize,
    /// Sung notes per song; a silent note is added at each end.
    pub notes_per_song: usize,
    /// MIDI semitone range for sung notes (inclusive).
    pub pitch_range: (i32, i32),
    /// Note duration range in seconds.
    pub duration_range: (f64, f64),
    /// Vibrato rate range in Hz.
    pub vibrato_rate_hz: (f64, f64),
    /// Vibrato depth range in semitones; set to (0, 0) for no vibrato.
    pub vibrato_depth: (f64, f64),
    /// Bound on the per-note onset jitter applied to the target, seconds.
    pub onset_jitter: f64,
    /// Observation noise on voiced frames, semitones (standard deviation).
    pub noise: f64,
    pub frame_period: f64,
    /// Width of the smooth pitch transition at each boundary, seconds.
    pub transition_width: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            songs: 4,
            notes_per_song: 12,
            pitch_range: (55, 72),
            duration_range: (0.3, 0.7),
            vibrato_rate_hz: (4.0, 7.0),
            vibrato_depth: (0.2, 0.5),
            onset_jitter: 0.015,
            noise: 0.02,
            frame_period: 0.005,
            transition_width: 0.120,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |reason: String| Err(DataError::BadSpec { reason });
        if self.songs == 0 || self.notes_per_song == 0 {
            return bad("songs and notes_per_song must be positive".into());
        }
        if self.pitch_range.0 > self.pitch_range.1 {
            return bad(format!("empty pitch range {:?}", self.pitch_range));
        }
        if !(self.duration_range.0 > 0.0 && self.duration_range.0 <= self.duration_range.1) {
            return bad(format!("bad duration range {:?}", self.duration_range));
        }
        if !(self.vibrato_rate_hz.0 > 0.0 && self.vibrato_rate_hz.0 <= self.vibrato_rate_hz.1) {
            return bad(format!("bad vibrato rate range {:?}", self.vibrato_rate_hz));
        }
        if !(0.0 <= self.vibrato_depth.0 && self.vibrato_depth.0 <= self.vibrato_depth.1) {
            return bad(format!("bad vibrato depth range {:?}", self.vibrato_depth));
        }
        if !(0.0..=0.030).contains(&self.onset_jitter) {
            return bad(format!(
                "onset jitter {} outside [0, 0.030]",
                self.onset_jitter
            ));
        }
        if self.onset_jitter >= self.duration_range.0 / 2.0 {
            return bad("onset jitter must stay below half the shortest duration".into());
        }
        if self.noise < 0.0 || self.frame_period <= 0.0 || self.transition_width <= 0.0 {
            return bad("noise, frame_period and transition_width must be non-negative".into());
        }
        Ok(())
    }
}

/// True per-note vibrato parameters behind a synthetic target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthVibrato {
    pub omega: f64,
    pub theta: f64,
    pub depth: f64,
}

/// True per-note generation parameters, for recovery tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthNote {
    /// Onset jitter applied to the target, seconds.
    pub offset: f64,
    pub vibrato: Option<GroundTruthVibrato>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub songs: BTreeMap<String, Vec<GroundTruthNote>>,
}

pub fn save_ground_truth(path: &Path, gt: &GroundTruth) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(gt).expect("ground truth serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Schema {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn range_f64<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit_f64(rng)
}

fn range_i32<R: Rng>(rng: &mut R, lo: i32, hi: i32) -> i32 {
    let span = (hi - lo + 1) as u64;
    lo + (rng.next_u64() % span) as i32
}

/// Standard normal sample (Box-Muller).
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1 = unit_f64(rng).max(f64::MIN_POSITIVE);
    let u2 = unit_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn pick_onset_type<R: Rng>(rng: &mut R) -> OnsetType {
    match rng.next_u64() % 3 {
        0 => OnsetType::Legato,
        1 => OnsetType::VowelLeading,
        _ => OnsetType::Default,
    }
}

/// Cubic smoothstep on [0, 1], clamped outside.
fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Effective pitch pair for a neighboring-note transition: a silent member
/// borrows the other's pitch, flattening the transition.
fn pair_pitches(score: &Score, first: usize, second: usize) -> (f64, f64) {
    let a = &score.notes[first];
    let b = &score.notes[second];
    match (a.is_silent, b.is_silent) {
        (false, false) => (a.pitch, b.pitch),
        (true, false) => (b.pitch, b.pitch),
        (false, true) => (a.pitch, a.pitch),
        (true, true) => (0.0, 0.0),
    }
}

/// Generates a corpus whose targets come from a known analytic model: smooth
/// pitch transitions at each (jittered) boundary, constant-depth sinusoidal
/// vibrato with random per-note frequency and phase, assembled through the
/// same envelope machinery the models train against, plus Gaussian
/// observation noise. The jitter is applied to the target only, never to the
/// score, to emulate score-vs-performance timing mismatch.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Corpus, GroundTruth), DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = Corpus::default();
    let mut gt = GroundTruth::default();

    for song in 0..spec.songs {
        let id = format!("song_{song:03}");
        let mut notes = Vec::with_capacity(spec.notes_per_song + 2);
        let mut onset = 0.0;
        for k in 0..spec.notes_per_song + 2 {
            let silent = k == 0 || k == spec.notes_per_song + 1;
            let duration = range_f64(&mut rng, spec.duration_range.0, spec.duration_range.1);
            let pitch = if silent {
                0.0
            } else {
                range_i32(&mut rng, spec.pitch_range.0, spec.pitch_range.1) as f64
            };
            notes.push(Note {
                onset,
                duration,
                pitch,
                is_silent: silent,
                onset_type: if silent {
                    OnsetType::Default
                } else {
                    pick_onset_type(&mut rng)
                },
            });
            onset += duration;
        }
        let score = Score {
            notes,
            frame_period: spec.frame_period,
        };
        let n = score.len();

        let mut gt_notes = Vec::with_capacity(n);
        let mut jitter = Vec::with_capacity(n);
        for i in 0..n {
            let j = if i == 0 {
                0.0
            } else {
                range_f64(&mut rng, -spec.onset_jitter, spec.onset_jitter)
            };
            jitter.push(j);
            let vibrato = if !score.notes[i].is_silent && spec.vibrato_depth.1 > 0.0 {
                Some(GroundTruthVibrato {
                    omega: 2.0
                        * std::f64::consts::PI
                        * range_f64(&mut rng, spec.vibrato_rate_hz.0, spec.vibrato_rate_hz.1),
                    theta: range_f64(&mut rng, -std::f64::consts::PI, std::f64::consts::PI),
                    depth: range_f64(&mut rng, spec.vibrato_depth.0, spec.vibrato_depth.1),
                })
            } else {
                None
            };
            gt_notes.push(GroundTruthNote {
                offset: jitter[i],
                vibrato,
            });
        }

        let grid = score_grid(&score);
        let boundaries: Vec<f64> = (0..=n)
            .map(|i| {
                if i < n {
                    score.notes[i].onset + jitter[i]
                } else {
                    score.end()
                }
            })
            .collect();
        let silent: Vec<bool> = score.notes.iter().map(|nt| nt.is_silent).collect();

        let w = spec.transition_width;
        let dinote_value = |k: usize, t: f64| {
            let (pa, pb) = pair_pitches(&score, k - 1, k);
            pa + (pb - pa) * smoothstep((t - boundaries[k]) / w + 0.5)
        };
        let mut dinotes = Vec::with_capacity(n);
        dinotes.push(Segment::constant(
            dinote_support(&grid, &boundaries, 0),
            dinote_value(1, grid.start),
        ));
        for k in 1..n {
            let frames = dinote_support(&grid, &boundaries, k);
            let values = frames
                .clone()
                .map(|f| dinote_value(k, grid.time(f)))
                .collect();
            dinotes.push(Segment {
                start_frame: frames.start,
                values,
            });
        }
        let mut mononotes = Vec::with_capacity(n);
        for i in 0..n {
            let frames = mononote_support(&grid, &boundaries, i);
            let seg = match &gt_notes[i].vibrato {
                Some(v) => {
                    let values = frames
                        .clone()
                        .map(|f| {
                            let t = grid.time(f);
                            v.depth * (v.omega * (t - boundaries[i]) + v.theta).sin()
                        })
                        .collect();
                    Segment {
                        start_frame: frames.start,
                        values,
                    }
                }
                None => Segment::constant(frames, 0.0),
            };
            mononotes.push(seg);
        }

        let mut target = assemble(&dinotes, &mononotes, &boundaries, &silent, &grid)
            .map_err(ModelError::from)?;
        if spec.noise > 0.0 {
            for f in 0..grid.count {
                if target.voiced[f] {
                    target.log_f0[f] += spec.noise * gaussian(&mut rng);
                }
            }
        }

        gt.songs.insert(id.clone(), gt_notes);
        corpus.items.push(CorpusItem { id, score, target });
    }
    Ok((corpus, gt))
}

// ---------------------------------------------------------------------------
// Model files

/// Everything in a model file besides the models themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    seed: u64,
    config: TrainConfig,
    transition: TransitionModel,
    sustain: SustainModel,
}

/// Renders the model pair as the versioned JSON document. Phases are wrapped
/// to (-pi, pi] on the way out; everything else round-trips bit-exactly.
pub fn model_to_json(
    transition: &TransitionModel,
    sustain: &SustainModel,
    metadata: &ModelMetadata,
) -> String {
    let mut sustain = sustain.clone();
    sustain.default_theta = wrap_angle(sustain.default_theta);
    for params in sustain.note_params.values_mut() {
        for p in params.iter_mut() {
            p.theta = wrap_angle(p.theta);
        }
    }
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        seed: metadata.seed,
        config: metadata.config.clone(),
        transition: transition.clone(),
        sustain,
    };
    let mut text = serde_json::to_string_pretty(&file).expect("model serializes");
    text.push('\n');
    text
}

pub fn save_model(
    path: &Path,
    transition: &TransitionModel,
    sustain: &SustainModel,
    metadata: &ModelMetadata,
) -> Result<(), DataError> {
    std::fs::write(path, model_to_json(transition, sustain, metadata)).map_err(io_err(path))
}

pub fn model_from_json(
    text: &str,
    path: &Path,
) -> Result<(TransitionModel, SustainModel, ModelMetadata), DataError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| DataError::Schema {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_i64())
        .ok_or_else(|| DataError::Schema {
            path: path.to_path_buf(),
            reason: "missing field `format_version`".into(),
        })?;
    if version != FORMAT_VERSION as i64 {
        return Err(DataError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| DataError::Schema {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let schema = |reason: String| DataError::Schema {
        path: path.to_path_buf(),
        reason,
    };
    file.transition
        .mlp
        .validate()
        .map_err(|e| schema(format!("transition mlp: {e}")))?;
    file.sustain
        .mlp
        .validate()
        .map_err(|e| schema(format!("sustain mlp: {e}")))?;
    Ok((
        file.transition,
        file.sustain,
        ModelMetadata {
            seed: file.seed,
            config: file.config,
        },
    ))
}

pub fn load_model(
    path: &Path,
) -> Result<(TransitionModel, SustainModel, ModelMetadata), DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    model_from_json(&text, path)
}
