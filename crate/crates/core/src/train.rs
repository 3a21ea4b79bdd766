//! Multi-stage training over a corpus of (score, F0 track) pairs.
//!
//! The schedule:
//! 1. transition model alone, offsets frozen at zero;
//! 2. transition model plus per-note onset offsets, clamped to ±30 ms;
//! 3. transition-only resynthesis, residual extraction, per-note vibrato
//!    frequency/phase estimation (no epochs);
//! 4. sustain model plus per-note phase and warp parameters, transition
//!    frozen;
//! 5. joint training of both networks at an exponentially decaying rate.
//!
//! The loss is always L1 on the fully assembled trajectory against the
//! target, over frames voiced in the target; a disabled sustain model
//! contributes zero, which the envelope structure makes well defined.
//! An epoch is one pass over all songs in a seeded shuffled order. Within a
//! song, voiced frames are shuffled into fixed-size minibatches with one
//! optimizer step per batch (per-frame predictions couple only through the
//! shared parameters, so frame-level batching is exact); per-song
//! accumulation is available as a config option. Stage boundaries reset
//! optimizer moments by default. Epoch counts are fixed up front; there is
//! no early stopping.

use crate::dataio::{Corpus, CorpusItem, DataError};
use crate::envelope::{containing_note, dinote_weight_at, mononote_weight_at, F0Track};
use crate::nn::{Activation, AdamState, Gradients, Mlp, NnError};
use crate::score::{Standardizer, SustainContext, TransitionContext};
use crate::sustain::{clamp_warp_slice, NoteVibrato, SustainModel};
use crate::transition::{clamp_offset_slice, ModelError, TransitionModel};
use crate::vibrato::{estimate_score, residual, EstimatorConfig};
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid config: {reason}")]
    BadConfig { reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("song {song} has no voiced target frames")]
    NoVoicedFrames { song: String },
    #[error("non-finite loss at stage {stage}, epoch {epoch}, song {song}")]
    NonFiniteLoss {
        stage: u8,
        epoch: usize,
        song: String,
    },
    #[error("non-finite gradient at stage {stage}, epoch {epoch}, song {song}: {source}")]
    NonFiniteGradient {
        stage: u8,
        epoch: usize,
        song: String,
        #[source]
        source: NnError,
    },
}

/// Training hyperparameters. The config file is JSON with these exact field
/// names; omitted fields take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Network learning rate.
    pub learning_rate: f64,
    /// Learning rate for onset offsets, in seconds per step.
    pub offset_learning_rate: f64,
    /// Learning rate for the per-note phase and warp parameters.
    pub aux_learning_rate: f64,
    /// Epochs for stages 1, 2, 4 and 5 (stage 3 is estimation, not descent).
    pub stage_epochs: [usize; 4],
    /// Per-epoch decay of the stage-5 learning rate.
    pub stage5_decay: f64,
    pub seed: u64,
    /// Voiced frames per optimizer step, shuffled within each song.
    /// `null` accumulates a whole song into a single step.
    pub batch_frames: Option<usize>,
    /// Hidden layer widths for both networks.
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    /// Keep training onset offsets during stage 5.
    pub train_offsets_in_joint: bool,
    /// Keep training phase/warp parameters during stage 5.
    pub train_vibrato_aux_in_joint: bool,
    /// Re-initialize optimizer moments at each stage boundary.
    pub reset_adam_each_stage: bool,
    pub estimator: EstimatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            offset_learning_rate: 1e-3,
            aux_learning_rate: 1e-3,
            stage_epochs: [10, 10, 60, 10],
            stage5_decay: 0.75,
            seed: 0,
            batch_frames: Some(64),
            hidden_layers: vec![64, 64],
            activation: Activation::Tanh,
            train_offsets_in_joint: false,
            train_vibrato_aux_in_joint: true,
            reset_adam_each_stage: true,
            estimator: EstimatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |reason: String| Err(TrainError::BadConfig { reason });
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("offset_learning_rate", self.offset_learning_rate),
            ("aux_learning_rate", self.aux_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.stage5_decay > 0.0 && self.stage5_decay <= 1.0) {
            return bad(format!("stage5_decay {} outside (0, 1]", self.stage5_decay));
        }
        if self.batch_frames == Some(0) {
            return bad("batch_frames must be positive".into());
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        Ok(())
    }

    fn layer_sizes(&self, input: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(&self.hidden_layers);
        sizes.push(1);
        sizes
    }
}

/// Stage-5 learning rate at (zero-based) epoch `e`: `base * decay^e`.
pub fn stage5_lr(base: f64, decay: f64, epoch: usize) -> f64 {
    base * decay.powi(epoch as i32)
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic song order for an epoch: a Fisher-Yates shuffle seeded from
/// (seed, epoch).
pub fn epoch_order(n_songs: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch, 0));
    let mut order: Vec<usize> = (0..n_songs).collect();
    shuffle(&mut rng, &mut order);
    order
}

fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

/// Mean absolute deviation over frames voiced in the target, semitones.
pub fn loss_l1(pred: &F0Track, target: &F0Track) -> Result<f64, TrainError> {
    pred.ensure_same_grid(target).map_err(ModelError::from)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for f in 0..target.grid.count {
        if target.voiced[f] {
            sum += (pred.log_f0[f] - target.log_f0[f]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::NoVoicedFrames {
            song: String::new(),
        });
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub epoch_losses: Vec<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub stages: Vec<StageReport>,
    /// Final onset offsets per training song, seconds.
    pub offsets_by_song: BTreeMap<String, Vec<f64>>,
    /// Final vibrato parameters per training song.
    pub vibrato_by_song: BTreeMap<String, Vec<NoteVibrato>>,
    /// Synthesis-time default vibrato frequency, rad/s.
    pub default_omega: f64,
}

impl TrainReport {
    /// Per-epoch losses as `stage,epoch,loss_semitones` CSV.
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("stage,epoch,loss_semitones\n");
        for stage in &self.stages {
            for (epoch, loss) in stage.epoch_losses.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", stage.stage, epoch, loss));
            }
        }
        out
    }
}

/// What a stage trains and whether the sustain model contributes.
#[derive(Debug, Clone, Copy, Default)]
struct StagePlan {
    include_sustain: bool,
    train_transition: bool,
    train_offsets: bool,
    train_sustain: bool,
    train_aux: bool,
}

struct SongState {
    offsets: Vec<f64>,
    vibrato: Vec<NoteVibrato>,
    /// Voiced target frame indices, the sampling pool for minibatches.
    voiced_frames: Vec<usize>,
    adam_offsets: Option<AdamState>,
    adam_theta: Option<AdamState>,
    adam_alpha: Option<AdamState>,
    adam_beta: Option<AdamState>,
}

/// Per-frame transition contribution (all dinotes weighted and summed) for
/// one song, used when both the transition network and offsets are frozen.
fn transition_contribution(
    transition: &TransitionModel,
    item: &CorpusItem,
    offsets: &[f64],
) -> Result<Vec<f64>, TrainError> {
    let score = &item.score;
    let grid = &item.target.grid;
    let boundaries = score.boundaries(Some(offsets)).map_err(ModelError::from)?;
    let n = score.len();
    let mut out = vec![0.0; grid.count];
    {
        let frames = crate::envelope::dinote_support(grid, &boundaries, 0);
        let t_eval = grid.start.clamp(boundaries[0], boundaries[1]);
        let value = transition.predict_frame(score, 1, t_eval, Some(offsets))?;
        for f in frames {
            out[f] += value * dinote_weight_at(&boundaries, 0, grid.time(f));
        }
    }
    for k in 1..n {
        for f in crate::envelope::dinote_support(grid, &boundaries, k) {
            let t = grid.time(f);
            let w = dinote_weight_at(&boundaries, k, t);
            if w == 0.0 {
                continue;
            }
            out[f] += transition.predict_frame(score, k, t, Some(offsets))? * w;
        }
    }
    Ok(out)
}

struct BatchGrads {
    abs_error_sum: f64,
    frames: usize,
    transition_net: Option<Gradients>,
    offsets: Option<Vec<f64>>,
    sustain_net: Option<Gradients>,
    theta: Option<Vec<f64>>,
    alpha: Option<Vec<f64>>,
    beta: Option<Vec<f64>>,
}

struct FrameEval {
    frame: usize,
    note: usize,
    upstream: f64,
    /// Covering real dinotes: index, standardized context, envelope weight.
    dinotes: Vec<(usize, [f64; TransitionContext::DIM], f64)>,
    mono_weight: f64,
}

/// Forward, loss and gradients over one minibatch of frames. A frame's
/// prediction is the weighted sum of the (at most two) dinotes and the one
/// mononote covering it, so the batch is evaluated frame by frame.
fn batch_pass(
    transition: &TransitionModel,
    sustain: &SustainModel,
    item: &CorpusItem,
    state: &SongState,
    plan: &StagePlan,
    frames: &[usize],
    frozen_transition: Option<&Vec<f64>>,
) -> Result<BatchGrads, TrainError> {
    let score = &item.score;
    let target = &item.target;
    let grid = &target.grid;
    let n = score.len();
    let offsets = Some(state.offsets.as_slice());
    let boundaries = score.boundaries(offsets).map_err(ModelError::from)?;
    let need_transition = plan.train_transition || plan.train_offsets;
    let last_dinote = n - 1;

    // The leading pseudo-dinote shares one context across its frames;
    // evaluated lazily if any batch frame falls under its support.
    let mut pseudo: Option<([f64; TransitionContext::DIM], f64)> = None;
    let mut pseudo_upstream = 0.0;

    let mut evals: Vec<FrameEval> = Vec::with_capacity(frames.len());
    let mut abs_error_sum = 0.0;

    for &f in frames {
        let t = grid.time(f);
        let note = containing_note(&boundaries, t);
        let mut prediction = 0.0;
        let mut dinotes = Vec::new();
        let mut pseudo_weight = 0.0;
        if let Some(base) = frozen_transition {
            prediction += base[f];
        } else {
            if note == 0 {
                pseudo_weight = dinote_weight_at(&boundaries, 0, t);
                if pseudo_weight > 0.0 {
                    if pseudo.is_none() {
                        let t_eval = grid.start.clamp(boundaries[0], boundaries[1]);
                        let ctx = transition.input(score, 1, t_eval, offsets)?;
                        let value = transition.mlp.forward(&ctx).map_err(ModelError::from)?
                            + score.residual_pitch(1);
                        pseudo = Some((ctx, value));
                    }
                    prediction += pseudo.as_ref().unwrap().1 * pseudo_weight;
                }
            }
            for k in [note, note + 1] {
                if k == 0 || k > last_dinote {
                    continue;
                }
                let w = dinote_weight_at(&boundaries, k, t);
                if w == 0.0 {
                    continue;
                }
                let ctx = transition.input(score, k, t, offsets)?;
                let value = transition.mlp.forward(&ctx).map_err(ModelError::from)?
                    + score.residual_pitch(k);
                prediction += value * w;
                if need_transition {
                    dinotes.push((k, ctx, w));
                }
            }
        }
        let mono_weight = mononote_weight_at(&boundaries, note, t);
        if plan.include_sustain && mono_weight > 0.0 {
            prediction += sustain.mononote_value(score, note, t, offsets, &state.vibrato[note])?
                * mono_weight;
        }
        let err = prediction - target.log_f0[f];
        abs_error_sum += err.abs();
        let upstream = err.signum();
        pseudo_upstream += upstream * pseudo_weight;
        evals.push(FrameEval {
            frame: f,
            note,
            upstream,
            dinotes,
            mono_weight,
        });
    }
    let scale = 1.0 / frames.len() as f64;

    let mut grads = BatchGrads {
        abs_error_sum,
        frames: frames.len(),
        transition_net: None,
        offsets: None,
        sustain_net: None,
        theta: None,
        alpha: None,
        beta: None,
    };

    if need_transition {
        let mut net = Gradients::zeros_like(&transition.mlp);
        let mut offset_grads = vec![0.0; n];
        let mut bucket;
        for eval in &evals {
            for (k, ctx, w) in &eval.dinotes {
                let up = eval.upstream * w * scale;
                if up == 0.0 {
                    continue;
                }
                bucket = [0.0; TransitionContext::DIM];
                transition
                    .mlp
                    .backward_accumulate(
                        ctx,
                        up,
                        &mut net,
                        plan.train_offsets.then_some(&mut bucket[..]),
                    )
                    .map_err(ModelError::from)?;
                if plan.train_offsets {
                    offset_grads[*k] += transition.position_gradient_to_offset(&bucket);
                }
            }
        }
        if let Some((ctx, _)) = &pseudo {
            let up = pseudo_upstream * scale;
            if up != 0.0 {
                bucket = [0.0; TransitionContext::DIM];
                transition
                    .mlp
                    .backward_accumulate(
                        ctx,
                        up,
                        &mut net,
                        plan.train_offsets.then_some(&mut bucket[..]),
                    )
                    .map_err(ModelError::from)?;
                if plan.train_offsets {
                    // The pseudo value is the first real dinote's prediction,
                    // so its position feature carries note 1's offset.
                    offset_grads[1] += transition.position_gradient_to_offset(&bucket);
                }
            }
        }
        if plan.train_transition {
            grads.transition_net = Some(net);
        }
        if plan.train_offsets {
            grads.offsets = Some(offset_grads);
        }
    }

    if plan.include_sustain && (plan.train_sustain || plan.train_aux) {
        let mut net = Gradients::zeros_like(&sustain.mlp);
        let mut theta = vec![0.0; n];
        let mut alpha = vec![0.0; n];
        let mut beta = vec![0.0; n];
        for eval in &evals {
            let up = eval.upstream * eval.mono_weight * scale;
            if up == 0.0 {
                continue;
            }
            let aux = sustain.vibrato_param_gradients(
                score,
                eval.note,
                grid.time(eval.frame),
                offsets,
                &state.vibrato[eval.note],
                up,
                &mut net,
            )?;
            theta[eval.note] += aux.theta;
            alpha[eval.note] += aux.alpha;
            beta[eval.note] += aux.beta;
        }
        if plan.train_sustain {
            grads.sustain_net = Some(net);
        }
        if plan.train_aux {
            grads.theta = Some(theta);
            grads.alpha = Some(alpha);
            grads.beta = Some(beta);
        }
    }

    Ok(grads)
}

/// Trains a transition/sustain model pair on the corpus per the staged
/// schedule and returns them with a per-epoch loss report.
pub fn train(
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<(TransitionModel, SustainModel, TrainReport), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    config.validate()?;
    corpus.validate()?;

    // Featurization statistics over the whole corpus, with zero offsets.
    let mut tctx: Vec<[f64; TransitionContext::DIM]> = Vec::new();
    let mut sctx: Vec<[f64; SustainContext::DIM]> = Vec::new();
    for item in &corpus.items {
        let grid = &item.target.grid;
        let boundaries = item.score.boundaries(None).map_err(ModelError::from)?;
        for k in 1..item.score.len() {
            for f in crate::envelope::dinote_support(grid, &boundaries, k) {
                tctx.push(
                    item.score
                        .transition_context(k, grid.time(f), None)
                        .map_err(ModelError::from)?
                        .0,
                );
            }
        }
        for i in 0..item.score.len() {
            for f in crate::envelope::mononote_support(grid, &boundaries, i) {
                sctx.push(
                    item.score
                        .sustain_context(i, grid.time(f), None)
                        .map_err(ModelError::from)?
                        .0,
                );
            }
        }
    }
    let t_std = Standardizer::fit(
        tctx.iter().map(|a| &a[..]),
        TransitionContext::DIM,
        &TransitionContext::REAL_DIMS,
    )
    .map_err(ModelError::from)?;
    let s_std = Standardizer::fit(
        sctx.iter().map(|a| &a[..]),
        SustainContext::DIM,
        &SustainContext::REAL_DIMS,
    )
    .map_err(ModelError::from)?;
    drop(tctx);
    drop(sctx);

    let mut transition = TransitionModel::new(
        Mlp::init(
            &config.layer_sizes(TransitionContext::DIM),
            config.activation,
            config.seed ^ 0x7472_616e,
        )
        .map_err(ModelError::from)?,
        t_std,
    )?;
    let mut sustain = SustainModel::new(
        Mlp::init(
            &config.layer_sizes(SustainContext::DIM),
            config.activation,
            config.seed ^ 0x7375_7374,
        )
        .map_err(ModelError::from)?,
        s_std,
    )?;

    let mut songs: Vec<SongState> = corpus
        .items
        .iter()
        .map(|item| {
            let voiced_frames: Vec<usize> = (0..item.target.grid.count)
                .filter(|&f| item.target.voiced[f])
                .collect();
            SongState {
                offsets: vec![0.0; item.score.len()],
                vibrato: Vec::new(),
                voiced_frames,
                adam_offsets: None,
                adam_theta: None,
                adam_alpha: None,
                adam_beta: None,
            }
        })
        .collect();
    for (item, state) in corpus.items.iter().zip(&songs) {
        if state.voiced_frames.is_empty() {
            return Err(TrainError::NoVoicedFrames {
                song: item.id.clone(),
            });
        }
    }

    let mut report = TrainReport {
        stages: Vec::new(),
        offsets_by_song: BTreeMap::new(),
        vibrato_by_song: BTreeMap::new(),
        default_omega: sustain.default_omega,
    };
    let mut global_epoch = 0u64;

    let stage1 = StagePlan {
        train_transition: true,
        ..StagePlan::default()
    };
    run_stage(
        1,
        config.stage_epochs[0],
        &stage1,
        corpus,
        config,
        &mut transition,
        &mut sustain,
        &mut songs,
        &mut global_epoch,
        &mut report,
    )?;

    let stage2 = StagePlan {
        train_transition: true,
        train_offsets: true,
        ..StagePlan::default()
    };
    run_stage(
        2,
        config.stage_epochs[1],
        &stage2,
        corpus,
        config,
        &mut transition,
        &mut sustain,
        &mut songs,
        &mut global_epoch,
        &mut report,
    )?;

    // Stage 3: vibrato frequency/phase initialization from the residual of
    // the transition-only resynthesis. Only needed if the sustain model will
    // actually train.
    if config.stage_epochs[2] + config.stage_epochs[3] > 0 {
        let mut estimates = Vec::with_capacity(corpus.items.len());
        let mut detected_omegas = Vec::new();
        for (item, state) in corpus.items.iter().zip(&songs) {
            let synth = crate::synth::synthesize_transition_only(
                &transition,
                &sustain,
                &item.score,
                Some(&state.offsets),
            )?;
            let res = residual(&item.target, &synth)?;
            let ests = estimate_score(&res, &item.score, Some(&state.offsets), &config.estimator)?;
            for e in &ests {
                if e.detected {
                    detected_omegas.push(e.omega);
                }
            }
            estimates.push(ests);
        }
        sustain.default_omega = if detected_omegas.is_empty() {
            2.0 * std::f64::consts::PI * config.estimator.fallback_rate_hz
        } else {
            detected_omegas.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = detected_omegas.len();
            if n % 2 == 1 {
                detected_omegas[n / 2]
            } else {
                0.5 * (detected_omegas[n / 2 - 1] + detected_omegas[n / 2])
            }
        };
        sustain.default_theta = 0.0;
        for (state, ests) in songs.iter_mut().zip(&estimates) {
            state.vibrato = ests
                .iter()
                .map(|e| {
                    if e.detected {
                        NoteVibrato {
                            omega: e.omega,
                            theta: e.theta,
                            alpha: 1.0,
                            beta: 1.0,
                            detected: true,
                        }
                    } else {
                        sustain.default_params()
                    }
                })
                .collect();
        }
    }

    let stage4 = StagePlan {
        include_sustain: true,
        train_sustain: true,
        train_aux: true,
        ..StagePlan::default()
    };
    run_stage(
        4,
        config.stage_epochs[2],
        &stage4,
        corpus,
        config,
        &mut transition,
        &mut sustain,
        &mut songs,
        &mut global_epoch,
        &mut report,
    )?;

    let stage5 = StagePlan {
        include_sustain: true,
        train_transition: true,
        train_sustain: true,
        train_offsets: config.train_offsets_in_joint,
        train_aux: config.train_vibrato_aux_in_joint,
    };
    run_stage(
        5,
        config.stage_epochs[3],
        &stage5,
        corpus,
        config,
        &mut transition,
        &mut sustain,
        &mut songs,
        &mut global_epoch,
        &mut report,
    )?;

    for (item, state) in corpus.items.iter().zip(&songs) {
        report
            .offsets_by_song
            .insert(item.id.clone(), state.offsets.clone());
        transition
            .offsets
            .insert(item.id.clone(), state.offsets.clone());
        if !state.vibrato.is_empty() {
            report
                .vibrato_by_song
                .insert(item.id.clone(), state.vibrato.clone());
            sustain
                .note_params
                .insert(item.id.clone(), state.vibrato.clone());
        }
    }
    report.default_omega = sustain.default_omega;
    Ok((transition, sustain, report))
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    stage_id: u8,
    epochs: usize,
    plan: &StagePlan,
    corpus: &Corpus,
    config: &TrainConfig,
    transition: &mut TransitionModel,
    sustain: &mut SustainModel,
    songs: &mut [SongState],
    global_epoch: &mut u64,
    report: &mut TrainReport,
) -> Result<(), TrainError> {
    let start = std::time::Instant::now();
    let mut stage = StageReport {
        stage: stage_id,
        epoch_losses: Vec::with_capacity(epochs),
        wall_time_s: 0.0,
    };
    if epochs == 0 {
        report.stages.push(stage);
        return Ok(());
    }

    let mut adam_transition = plan
        .train_transition
        .then(|| AdamState::new(transition.mlp.param_count(), config.learning_rate));
    let mut adam_sustain = plan
        .train_sustain
        .then(|| AdamState::new(sustain.mlp.param_count(), config.learning_rate));
    for (item, state) in corpus.items.iter().zip(songs.iter_mut()) {
        let n = item.score.len();
        if plan.train_offsets && (config.reset_adam_each_stage || state.adam_offsets.is_none()) {
            state.adam_offsets = Some(AdamState::new(n, config.offset_learning_rate));
        }
        if plan.train_aux && (config.reset_adam_each_stage || state.adam_theta.is_none()) {
            state.adam_theta = Some(AdamState::new(n, config.aux_learning_rate));
            state.adam_alpha = Some(AdamState::new(n, config.aux_learning_rate));
            state.adam_beta = Some(AdamState::new(n, config.aux_learning_rate));
        }
    }

    // With both the transition network and the offsets frozen, the dinote
    // contribution never changes within the stage; compute it once.
    let frozen_transition: Option<Vec<Vec<f64>>> = if !plan.train_transition && !plan.train_offsets
    {
        let mut bases = Vec::with_capacity(corpus.items.len());
        for (item, state) in corpus.items.iter().zip(songs.iter()) {
            bases.push(transition_contribution(transition, item, &state.offsets)?);
        }
        Some(bases)
    } else {
        None
    };

    let mut batch_buf: Vec<usize> = Vec::new();
    for epoch in 0..epochs {
        let lr_scale = if stage_id == 5 {
            stage5_lr(1.0, config.stage5_decay, epoch)
        } else {
            1.0
        };
        let order = epoch_order(corpus.items.len(), config.seed, *global_epoch);
        let mut abs_sum = 0.0;
        let mut frame_count = 0usize;

        for &s in &order {
            let item = &corpus.items[s];
            let state = &mut songs[s];
            batch_buf.clear();
            batch_buf.extend_from_slice(&state.voiced_frames);
            let batch_size = match config.batch_frames {
                Some(k) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                        config.seed,
                        *global_epoch,
                        s as u64 + 1,
                    ));
                    shuffle(&mut rng, &mut batch_buf);
                    k
                }
                None => batch_buf.len(),
            };

            let mut at = 0;
            while at < batch_buf.len() {
                let end = (at + batch_size).min(batch_buf.len());
                let frames = &batch_buf[at..end];
                at = end;

                let grads = batch_pass(
                    transition,
                    sustain,
                    item,
                    state,
                    plan,
                    frames,
                    frozen_transition.as_ref().map(|b| &b[s]),
                )?;
                if !grads.abs_error_sum.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        stage: stage_id,
                        epoch,
                        song: item.id.clone(),
                    });
                }
                abs_sum += grads.abs_error_sum;
                frame_count += grads.frames;

                let grad_err = |source: NnError| TrainError::NonFiniteGradient {
                    stage: stage_id,
                    epoch,
                    song: item.id.clone(),
                    source,
                };

                if let (Some(adam), Some(net)) = (adam_transition.as_mut(), &grads.transition_net) {
                    let mut params = transition.mlp.params_flat();
                    adam.step(
                        &mut params,
                        &net.params_flat(),
                        Some(config.learning_rate * lr_scale),
                    )
                    .map_err(grad_err)?;
                    transition.mlp.set_params_flat(&params).map_err(grad_err)?;
                }
                if let Some(g) = &grads.offsets {
                    let adam = state.adam_offsets.as_mut().expect("offset state");
                    adam.step(
                        &mut state.offsets,
                        g,
                        Some(config.offset_learning_rate * lr_scale),
                    )
                    .map_err(grad_err)?;
                    clamp_offset_slice(&mut state.offsets);
                }
                if let (Some(adam), Some(net)) = (adam_sustain.as_mut(), &grads.sustain_net) {
                    let mut params = sustain.mlp.params_flat();
                    adam.step(
                        &mut params,
                        &net.params_flat(),
                        Some(config.learning_rate * lr_scale),
                    )
                    .map_err(grad_err)?;
                    sustain.mlp.set_params_flat(&params).map_err(grad_err)?;
                }
                if let (Some(gt), Some(ga), Some(gb)) = (&grads.theta, &grads.alpha, &grads.beta) {
                    let aux_lr = Some(config.aux_learning_rate * lr_scale);
                    let mut theta: Vec<f64> = state.vibrato.iter().map(|v| v.theta).collect();
                    let mut alpha: Vec<f64> = state.vibrato.iter().map(|v| v.alpha).collect();
                    let mut beta: Vec<f64> = state.vibrato.iter().map(|v| v.beta).collect();
                    state
                        .adam_theta
                        .as_mut()
                        .expect("theta state")
                        .step(&mut theta, gt, aux_lr)
                        .map_err(grad_err)?;
                    state
                        .adam_alpha
                        .as_mut()
                        .expect("alpha state")
                        .step(&mut alpha, ga, aux_lr)
                        .map_err(grad_err)?;
                    state
                        .adam_beta
                        .as_mut()
                        .expect("beta state")
                        .step(&mut beta, gb, aux_lr)
                        .map_err(grad_err)?;
                    for (i, v) in state.vibrato.iter_mut().enumerate() {
                        v.theta = theta[i];
                        v.alpha = alpha[i];
                        v.beta = beta[i];
                    }
                    clamp_warp_slice(&mut state.vibrato);
                }
            }
        }
        *global_epoch += 1;
        stage.epoch_losses.push(abs_sum / frame_count as f64);
    }

    stage.wall_time_s = start.elapsed().as_secs_f64();
    report.stages.push(stage);
    Ok(())
}

/// Convenience for tests and callers: the full trajectory a trained pair
/// produces for one training item, using its stored per-song parameters.
pub fn training_synthesis(
    transition: &TransitionModel,
    sustain: &SustainModel,
    item: &CorpusItem,
) -> Result<F0Track, TrainError> {
    let offsets = transition.offsets.get(&item.id).cloned();
    let vibrato = sustain.note_params.get(&item.id);
    let mode = match vibrato {
        Some(v) => crate::synth::VibratoMode::PerNote(v),
        None => crate::synth::VibratoMode::Defaults,
    };
    Ok(crate::synth::synthesize(
        transition,
        sustain,
        &item.score,
        offsets.as_deref(),
        mode,
    )?)
}
