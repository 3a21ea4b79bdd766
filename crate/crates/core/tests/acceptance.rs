//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured quantities (visible with `--nocapture`).
//!
//! Gradient checks compare against a central finite-difference oracle with
//! h = 1e-6 in f64; the relative error of a pair (a, b) is
//! |a - b| / max(|a|, |b|, 1e-3), required below 1e-5.

use std::sync::OnceLock;
use tsf0::dataio::{
    generate_synthetic, model_from_json, model_to_json, ModelMetadata, SyntheticSpec,
};
use tsf0::envelope::{dinote_weight_at, mononote_weight_at, F0Track, FrameGrid};
use tsf0::nn::{Activation, Gradients, Mlp};
use tsf0::score::{Note, OnsetType, Score, Standardizer};
use tsf0::sustain::{warp, warp_derivative, wrap_angle, NoteVibrato, SustainModel};
use tsf0::synth::{synthesize, VibratoMode};
use tsf0::train::{train, TrainConfig};
use tsf0::transition::TransitionModel;
use tsf0::vibrato::{estimate_score, EstimatorConfig};
use tsf0::TrainReport;

use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_H: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-5;

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn central_diff<F: FnMut(f64) -> f64>(mut f: F, x: f64) -> f64 {
    (f(x + FD_H) - f(x - FD_H)) / (2.0 * FD_H)
}

/// Random silence-bracketed contiguous score.
fn random_score(rng: &mut ChaCha8Rng, min_notes: usize, max_notes: usize) -> Score {
    let sung = min_notes + (rng.next_u64() as usize) % (max_notes - min_notes + 1);
    let mut notes = Vec::new();
    let mut onset = 0.0;
    for k in 0..sung + 2 {
        let silent = k == 0 || k == sung + 1 || unit(rng) < 0.08;
        let duration = uniform(rng, 0.15, 1.0);
        let pitch = if silent {
            0.0
        } else {
            (55 + (rng.next_u64() % 18) as i64) as f64
        };
        let onset_type = match rng.next_u64() % 3 {
            0 => OnsetType::Legato,
            1 => OnsetType::VowelLeading,
            _ => OnsetType::Default,
        };
        notes.push(Note {
            onset,
            duration,
            pitch,
            is_silent: silent,
            onset_type,
        });
        onset += duration;
    }
    Score {
        notes,
        frame_period: 0.005,
    }
}

/// Criterion 1: dinote envelope weights sum to one at every frame between
/// the first and last note onsets, and the mononote parabola is exactly zero
/// at every note boundary, over 100 random valid scores.
#[test]
fn criterion_1_envelope_partition_of_unity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0EA1);
    let mut frames_checked = 0usize;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let score = random_score(&mut rng, 1, 13);
        assert!(score.validate().is_empty());
        let boundaries = score.boundaries(None).unwrap();
        let n = score.len();
        let grid = FrameGrid::for_span(score.start(), score.end(), score.frame_period);
        for f in 0..grid.count {
            let t = grid.time(f);
            if t > boundaries[n - 1] {
                continue; // trailing fade inside the final silent note
            }
            let sum: f64 = (0..n).map(|k| dinote_weight_at(&boundaries, k, t)).sum();
            worst = worst.max((sum - 1.0).abs());
            frames_checked += 1;
        }
        for i in 0..n {
            assert_eq!(mononote_weight_at(&boundaries, i, boundaries[i]), 0.0);
            assert_eq!(mononote_weight_at(&boundaries, i, boundaries[i + 1]), 0.0);
        }
    }
    assert!(worst < 1e-9, "worst deviation {worst}");
    println!(
        "criterion 1 (envelope partition of unity): PASS — {frames_checked} frames, worst |sum-1| = {worst:.2e}, boundary parabolas exactly 0"
    );
}

/// Criterion 2: the Hermite warp is the identity at unit slopes (exactly)
/// and strictly increasing over a 16x16 slope lattice sampled at 1e-3.
#[test]
fn criterion_2_warp_correctness() {
    for k in 0..=1000 {
        let tau = k as f64 / 1000.0;
        assert_eq!(warp(tau, 1.0, 1.0).unwrap(), tau);
    }
    let mut min_slope = f64::INFINITY;
    for ai in 0..16 {
        for bi in 0..16 {
            let a = 0.5 + 1.5 * ai as f64 / 15.0;
            let b = 0.5 + 1.5 * bi as f64 / 15.0;
            for k in 0..=1000 {
                let tau = k as f64 / 1000.0;
                let d = warp_derivative(tau, a, b).unwrap();
                assert!(d > 0.0, "slope {d} at tau={tau}, a={a}, b={b}");
                min_slope = min_slope.min(d);
            }
        }
    }
    println!(
        "criterion 2 (warp correctness): PASS — identity exact at unit slopes, min derivative {min_slope:.4} over 16x16 lattice"
    );
}

fn identity_standardizer(dim: usize, real: &[usize]) -> Standardizer {
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

fn three_note_score(dur: f64) -> Score {
    Score {
        notes: vec![
            Note {
                onset: 0.0,
                duration: 1.0,
                pitch: 0.0,
                is_silent: true,
                onset_type: OnsetType::Default,
            },
            Note {
                onset: 1.0,
                duration: dur,
                pitch: 62.0,
                is_silent: false,
                onset_type: OnsetType::Default,
            },
            Note {
                onset: 1.0 + dur,
                duration: 1.0,
                pitch: 0.0,
                is_silent: true,
                onset_type: OnsetType::Default,
            },
        ],
        frame_period: 0.005,
    }
}

/// Criterion 3: analytic gradients match central finite differences for
/// network weights, network inputs, onset offsets, and the vibrato phase and
/// warp parameters, over at least 100 seeded configurations.
#[test]
fn criterion_3_gradient_oracle() {
    let mut configs = 0usize;
    let mut comparisons = 0usize;
    let mut worst: f64 = 0.0;
    let mut check = |a: f64, b: f64, what: &str, seed: u64| {
        let e = rel_err(a, b);
        worst = worst.max(e);
        comparisons += 1;
        assert!(
            e < GRAD_TOL,
            "seed {seed} {what}: analytic {a} vs fd {b} (rel {e:.2e})"
        );
    };

    // Network weights and inputs across sizes and activations, including the
    // full default topology.
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9));
        let sizes: Vec<usize> = match seed % 4 {
            0 => vec![9, 8, 8, 1],
            1 => vec![11, 6, 1],
            2 => vec![5, 12, 4, 1],
            _ => vec![9, 64, 64, 1],
        };
        let activation = if seed % 5 == 0 {
            Activation::Sigmoid
        } else {
            Activation::Tanh
        };
        let mlp = Mlp::init(&sizes, activation, seed).unwrap();
        let x: Vec<f64> = (0..sizes[0])
            .map(|_| uniform(&mut rng, -2.0, 2.0))
            .collect();
        let upstream = uniform(&mut rng, 0.25, 1.5);
        let grads = mlp.backward(&x, upstream).unwrap();
        let flat = mlp.params_flat();
        let flat_grads = grads.params_flat();
        // All parameters for the small networks; a seeded sample of 400 for
        // the full-size one to keep the runtime bounded.
        let probe: Vec<usize> = if flat.len() > 1000 {
            (0..400)
                .map(|_| (rng.next_u64() as usize) % flat.len())
                .collect()
        } else {
            (0..flat.len()).collect()
        };
        for p in probe {
            let mut probe_net = mlp.clone();
            let fd = central_diff(
                |v| {
                    let mut params = flat.clone();
                    params[p] = v;
                    probe_net.set_params_flat(&params).unwrap();
                    upstream * probe_net.forward(&x).unwrap()
                },
                flat[p],
            );
            check(flat_grads[p], fd, &format!("weight {p}"), seed);
        }
        for i in 0..x.len() {
            let fd = central_diff(
                |v| {
                    let mut xi = x.clone();
                    xi[i] = v;
                    upstream * mlp.forward(&xi).unwrap()
                },
                x[i],
            );
            check(grads.input[i], fd, &format!("input {i}"), seed);
        }
        configs += 1;
    }

    // Onset offset gradients through the position feature.
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xC2B2_AE3D) ^ 0xD1);
        let mut std = identity_standardizer(9, &[0, 1, 2, 8]);
        std.mean[8] = uniform(&mut rng, -0.1, 0.1);
        std.std[8] = uniform(&mut rng, 0.2, 2.0);
        let model = TransitionModel::new(
            Mlp::init(&[9, 10, 6, 1], Activation::Tanh, seed ^ 0xAA).unwrap(),
            std,
        )
        .unwrap();
        let score = three_note_score(uniform(&mut rng, 0.5, 1.5));
        let t = uniform(&mut rng, 0.6, 1.4);
        let upstream = uniform(&mut rng, -1.5, 1.5);
        let base = uniform(&mut rng, -0.01, 0.01);
        let offsets = vec![0.0, base, 0.0];
        let analytic = model
            .offset_gradient(&score, 1, t, Some(&offsets), upstream)
            .unwrap();
        let fd = central_diff(
            |d| {
                let o = vec![0.0, d, 0.0];
                upstream * model.predict_frame(&score, 1, t, Some(&o)).unwrap()
            },
            base,
        );
        check(analytic, fd, "offset", seed);
        configs += 1;
    }

    // Vibrato phase and warp-slope gradients through the sinusoid.
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x1234_5678) ^ 0xF0);
        let model = SustainModel::new(
            Mlp::init(&[11, 10, 1], Activation::Tanh, seed ^ 0xBB).unwrap(),
            identity_standardizer(11, &[0, 3, 4, 5, 9, 10]),
        )
        .unwrap();
        let dur = uniform(&mut rng, 0.6, 1.8);
        let score = three_note_score(dur);
        let params = NoteVibrato {
            omega: 2.0 * std::f64::consts::PI * uniform(&mut rng, 3.5, 7.5),
            theta: uniform(&mut rng, -2.5, 2.5),
            alpha: uniform(&mut rng, 0.55, 1.95),
            beta: uniform(&mut rng, 0.55, 1.95),
            detected: true,
        };
        let t = uniform(&mut rng, 1.05, 1.0 + dur - 0.05);
        let upstream = uniform(&mut rng, -1.5, 1.5);
        let mut acc = Gradients::zeros_like(&model.mlp);
        let got = model
            .vibrato_param_gradients(&score, 1, t, None, &params, upstream, &mut acc)
            .unwrap();
        let eval =
            |p: NoteVibrato| upstream * model.mononote_value(&score, 1, t, None, &p).unwrap();
        let fd_theta = central_diff(
            |v| {
                let mut p = params;
                p.theta = v;
                eval(p)
            },
            params.theta,
        );
        let fd_alpha = central_diff(
            |v| {
                let mut p = params;
                p.alpha = v;
                eval(p)
            },
            params.alpha,
        );
        let fd_beta = central_diff(
            |v| {
                let mut p = params;
                p.beta = v;
                eval(p)
            },
            params.beta,
        );
        check(got.theta, fd_theta, "theta", seed);
        check(got.alpha, fd_alpha, "alpha", seed);
        check(got.beta, fd_beta, "beta", seed);
        configs += 1;
    }

    assert!(configs >= 100, "only {configs} configurations");
    println!(
        "criterion 3 (gradient oracle): PASS — {configs} configurations, {comparisons} comparisons, worst relative error {worst:.2e}"
    );
}

/// Criterion 4: after stages 1-2 on the frozen jittered corpus, at least 80%
/// of non-silent notes recover their true onset offset within 10 ms, and no
/// learned offset escapes the ±30 ms clamp.
#[test]
fn criterion_4_offset_recovery() {
    let spec = SyntheticSpec {
        songs: 10,
        notes_per_song: 30,
        pitch_range: (57, 67),
        duration_range: (0.35, 0.7),
        vibrato_depth: (0.0, 0.0),
        onset_jitter: 0.025,
        noise: 0.05,
        seed: 101,
        ..SyntheticSpec::default()
    };
    let (corpus, gt) = generate_synthetic(&spec).unwrap();
    let config = TrainConfig {
        stage_epochs: [10, 10, 0, 0],
        seed: 101 ^ 0xBEEF,
        ..TrainConfig::default()
    };
    let (transition, _, _) = train(&corpus, &config).unwrap();

    let mut within = 0usize;
    let mut total = 0usize;
    let mut err_sum = 0.0;
    let mut max_abs: f64 = 0.0;
    for item in &corpus.items {
        let offsets = &transition.offsets[&item.id];
        let truth = &gt.songs[&item.id];
        for (i, note) in item.score.notes.iter().enumerate() {
            if note.is_silent {
                continue;
            }
            let err = (offsets[i] - truth[i].offset).abs();
            err_sum += err;
            total += 1;
            if err < 0.010 {
                within += 1;
            }
            max_abs = max_abs.max(offsets[i].abs());
        }
    }
    let fraction = within as f64 / total as f64;
    assert!(fraction >= 0.80, "only {within}/{total} notes within 10 ms");
    assert!(
        max_abs <= 0.030 + 1e-12,
        "offset escaped the clamp: {max_abs}"
    );
    println!(
        "criterion 4 (offset recovery): PASS — {within}/{total} notes ({:.1}%) within 10 ms, mean error {:.2} ms, max |offset| {:.1} ms",
        100.0 * fraction,
        1000.0 * err_sum / total as f64,
        1000.0 * max_abs
    );
}

/// Criterion 5: injected vibrato sinusoids are recovered within 0.2 Hz and
/// 0.3 rad on at least 90% of notes; zero and noise-only residuals yield no
/// detections.
#[test]
fn criterion_5_vibrato_estimation() {
    let cfg = EstimatorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x51B5);
    let mut ok = 0usize;
    let total = 100usize;
    let mut worst_f: f64 = 0.0;
    let mut worst_ph: f64 = 0.0;
    for _ in 0..total {
        let dur = uniform(&mut rng, 1.0, 2.0);
        let rate = uniform(&mut rng, 4.0, 7.0);
        let depth = uniform(&mut rng, 0.2, 0.8);
        let theta = uniform(&mut rng, -3.0, 3.0);
        let omega = 2.0 * std::f64::consts::PI * rate;
        let score = three_note_score(dur);
        let grid = FrameGrid::for_span(0.0, score.end(), 0.005);
        let mut values = vec![0.0; grid.count];
        let mut voiced = vec![false; grid.count];
        for f in grid.frames_in(1.0, 1.0 + dur) {
            let t = grid.time(f);
            values[f] = depth * (omega * (t - 1.0) + theta).sin();
            voiced[f] = true;
        }
        let residual_track = F0Track {
            grid,
            log_f0: values,
            voiced,
        };
        let ests = estimate_score(&residual_track, &score, None, &cfg).unwrap();
        let e = &ests[1];
        if !e.detected {
            continue;
        }
        let f_err = (e.omega - omega).abs() / (2.0 * std::f64::consts::PI);
        let ph_err = wrap_angle(e.theta - theta).abs();
        if f_err < 0.2 && ph_err < 0.3 {
            ok += 1;
            worst_f = worst_f.max(f_err);
            worst_ph = worst_ph.max(ph_err);
        }
    }
    assert!(ok * 100 >= total * 90, "only {ok}/{total} recovered");

    // Zero residual: nothing to detect.
    let score = three_note_score(2.0);
    let grid = FrameGrid::for_span(0.0, score.end(), 0.005);
    let zero = F0Track {
        grid,
        log_f0: vec![0.0; grid.count],
        voiced: vec![true; grid.count],
    };
    let ests = estimate_score(&zero, &score, None, &cfg).unwrap();
    assert!(ests.iter().all(|e| !e.detected));

    // Small white noise: rejected by the prominence test.
    let mut noise_detections = 0usize;
    for seed in 0..50u64 {
        let mut nrng = ChaCha8Rng::seed_from_u64(seed ^ 0x7071);
        let mut values = vec![0.0; grid.count];
        for f in grid.frames_in(1.0, 3.0) {
            values[f] = 0.05 * (2.0 * unit(&mut nrng) - 1.0);
        }
        let track = F0Track {
            grid,
            log_f0: values,
            voiced: vec![true; grid.count],
        };
        let ests = estimate_score(&track, &score, None, &cfg).unwrap();
        noise_detections += ests.iter().filter(|e| e.detected).count();
    }
    assert_eq!(noise_detections, 0, "noise-only residuals were detected");
    println!(
        "criterion 5 (vibrato estimation): PASS — {ok}/{total} recovered (worst {worst_f:.3} Hz / {worst_ph:.3} rad among passes), zero and noise residuals undetected"
    );
}

struct Trained {
    transition: TransitionModel,
    sustain: SustainModel,
    report: TrainReport,
}

fn e2e_fixture() -> &'static Trained {
    static FIXTURE: OnceLock<Trained> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let spec = SyntheticSpec {
            songs: 12,
            notes_per_song: 14,
            pitch_range: (60, 66),
            duration_range: (0.5, 0.8),
            vibrato_rate_hz: (4.5, 6.5),
            vibrato_depth: (0.2, 0.5),
            onset_jitter: 0.015,
            noise: 0.02,
            seed: 7,
            ..SyntheticSpec::default()
        };
        let (corpus, _) = generate_synthetic(&spec).unwrap();
        let config = TrainConfig {
            seed: 7 ^ 0xF00D,
            ..TrainConfig::default()
        };
        let (transition, sustain, report) = train(&corpus, &config).unwrap();
        Trained {
            transition,
            sustain,
            report,
        }
    })
}

/// Criterion 6: the full five-stage schedule (10/10/—/60/10 epochs, decayed
/// joint stage) reaches a final training L1 under 0.1 semitones on a
/// ground-truth corpus, with each stage's loss non-increasing from its first
/// to its last epoch.
#[test]
fn criterion_6_end_to_end_fit() {
    let trained = e2e_fixture();
    let mut summary = Vec::new();
    for stage in &trained.report.stages {
        if stage.epoch_losses.is_empty() {
            continue;
        }
        let first = *stage.epoch_losses.first().unwrap();
        let last = *stage.epoch_losses.last().unwrap();
        assert!(
            last <= first + 1e-12,
            "stage {} loss increased: {first} -> {last}",
            stage.stage
        );
        summary.push(format!("S{} {:.4}->{:.4}", stage.stage, first, last));
    }
    let final_loss = *trained
        .report
        .stages
        .last()
        .unwrap()
        .epoch_losses
        .last()
        .unwrap();
    assert!(final_loss < 0.1, "final training L1 = {final_loss}");
    println!(
        "criterion 6 (end-to-end fit): PASS — final L1 {final_loss:.4} semitones; {}",
        summary.join(", ")
    );
}

/// Criterion 7: synthesized tracks on unseen random scores never jump more
/// than 0.5 semitones between consecutive voiced frames at 5 ms.
#[test]
fn criterion_7_continuity() {
    let trained = e2e_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0_17);
    let mut worst: f64 = 0.0;
    let mut pairs = 0usize;
    let mut check = |track: &F0Track| {
        for f in 1..track.grid.count {
            if track.voiced[f - 1] && track.voiced[f] {
                let jump = (track.log_f0[f] - track.log_f0[f - 1]).abs();
                worst = worst.max(jump);
                pairs += 1;
            }
        }
    };
    for _ in 0..20 {
        let score = random_score(&mut rng, 2, 12);
        let track = synthesize(
            &trained.transition,
            &trained.sustain,
            &score,
            None,
            VibratoMode::Defaults,
        )
        .unwrap();
        check(&track);
    }
    // Untrained (randomly initialized) models must satisfy the same bound.
    let raw_transition = TransitionModel::new(
        Mlp::init(&[9, 64, 64, 1], Activation::Tanh, 0xA0).unwrap(),
        identity_standardizer(9, &[0, 1, 2, 8]),
    )
    .unwrap();
    let raw_sustain = SustainModel::new(
        Mlp::init(&[11, 64, 64, 1], Activation::Tanh, 0xA1).unwrap(),
        identity_standardizer(11, &[0, 3, 4, 5, 9, 10]),
    )
    .unwrap();
    for _ in 0..10 {
        let score = random_score(&mut rng, 2, 12);
        let track = synthesize(
            &raw_transition,
            &raw_sustain,
            &score,
            None,
            VibratoMode::Defaults,
        )
        .unwrap();
        check(&track);
    }
    assert!(worst <= 0.5, "worst inter-frame jump {worst}");
    println!(
        "criterion 7 (continuity): PASS — {pairs} voiced frame pairs, worst jump {worst:.4} semitones"
    );
}

/// Criterion 8: identical corpus, config and seed produce bit-identical
/// model files, and a saved model loads back exactly.
#[test]
fn criterion_8_determinism_and_serialization() {
    let spec = SyntheticSpec {
        songs: 3,
        notes_per_song: 6,
        duration_range: (0.5, 0.8),
        seed: 42,
        ..SyntheticSpec::default()
    };
    let config = TrainConfig {
        stage_epochs: [2, 2, 2, 2],
        seed: 42,
        ..TrainConfig::default()
    };
    let run = || {
        let (corpus, _) = generate_synthetic(&spec).unwrap();
        train(&corpus, &config).unwrap()
    };
    let (t1, s1, _) = run();
    let (t2, s2, _) = run();
    let metadata = ModelMetadata {
        seed: config.seed,
        config: config.clone(),
    };
    let file1 = model_to_json(&t1, &s1, &metadata);
    let file2 = model_to_json(&t2, &s2, &metadata);
    assert_eq!(file1, file2, "model files differ between identical runs");

    let (t3, s3, m3) = model_from_json(&file1, std::path::Path::new("mem.json")).unwrap();
    assert_eq!(model_to_json(&t3, &s3, &m3), file1);
    assert_eq!(t3.mlp, t1.mlp);
    assert_eq!(t3.standardizer, t1.standardizer);
    assert_eq!(t3.offsets, t1.offsets);
    assert_eq!(s3.mlp, s1.mlp);
    assert_eq!(s3.default_omega, s1.default_omega);
    println!(
        "criterion 8 (determinism and serialization): PASS — bit-identical files ({} bytes), exact round-trip",
        file1.len()
    );
}
