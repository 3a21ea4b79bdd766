//! Command-line frontend: training, synthesis, synthetic corpus generation,
//! vibrato estimation, and objective evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
//! failure. Every error prints a single diagnostic line prefixed with
//! `error[usage]:`, `error[data]:` or `error[numeric]:`.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tsf0::dataio::{
    generate_synthetic, load_corpus, load_model, read_score, save_ground_truth, save_model,
    write_f0_track, write_score, DataError, ModelMetadata, SyntheticSpec,
};
use tsf0::synth::{synthesize, synthesize_transition_only, VibratoMode};
use tsf0::train::{train, TrainConfig, TrainError};
use tsf0::vibrato::{estimate_score, residual};

#[derive(Parser)]
#[command(
    name = "tsf0",
    version,
    about = "Singing-voice F0 trajectory generation from note-level scores"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train transition and sustain models on parallel score/F0 file lists.
    Train {
        /// Score JSON files, one per song.
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
        /// F0 track files parallel to --scores.
        #[arg(long, num_args = 1.., required = true)]
        f0: Vec<PathBuf>,
        /// Training config JSON; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output model JSON path.
        #[arg(long)]
        out_model: PathBuf,
        /// Optional training report JSON path; per-epoch losses are also
        /// written next to it with a .csv extension.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Synthesize an F0 track for a score with a trained model.
    Synth {
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output F0 text file (time_s<TAB>f0_hz per frame).
        #[arg(long)]
        out_f0: PathBuf,
        /// Zero out the vibrato (sustain) contribution.
        #[arg(long)]
        no_vibrato: bool,
    },
    /// Generate a synthetic corpus with known ground truth.
    GenSynth {
        /// Generator spec JSON; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Estimate per-note vibrato parameters from residual F0.
    Estimate {
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        f0: Vec<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        /// Output CSV: song_id,note_index,detected,omega_rad_s,theta_rad,magnitude
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Compare a synthesized trajectory against a target track.
    Eval {
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        f0: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output CSV: time_s,target_semitones,synth_semitones,voiced
        #[arg(long)]
        out_csv: PathBuf,
    },
}

enum CliError {
    Data(String),
    Numeric(String),
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<tsf0::ModelError> for CliError {
    fn from(e: tsf0::ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("error[usage]: {}", first_line(&e.to_string()));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Data(msg)) => {
            eprintln!("error[data]: {}", first_line(&msg));
            ExitCode::from(2)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("error[numeric]: {}", first_line(&msg));
            ExitCode::from(3)
        }
    }
}

fn first_line(s: &str) -> &str {
    s.lines().next().unwrap_or(s)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            scores,
            f0,
            config,
            out_model,
            report,
        } => cmd_train(
            &scores,
            &f0,
            config.as_deref(),
            &out_model,
            report.as_deref(),
        ),
        Command::Synth {
            score,
            model,
            out_f0,
            no_vibrato,
        } => cmd_synth(&score, &model, &out_f0, no_vibrato),
        Command::GenSynth { spec, out_dir } => cmd_gen_synth(spec.as_deref(), &out_dir),
        Command::Estimate {
            scores,
            f0,
            model,
            out_csv,
        } => cmd_estimate(&scores, &f0, &model, &out_csv),
        Command::Eval {
            score,
            f0,
            model,
            out_csv,
        } => cmd_eval(&score, &f0, &model, &out_csv),
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: invalid config: {e}", path.display())))
}

fn cmd_train(
    scores: &[PathBuf],
    f0: &[PathBuf],
    config: Option<&Path>,
    out_model: &Path,
    report_path: Option<&Path>,
) -> Result<(), CliError> {
    let config = load_config(config)?;
    let corpus = load_corpus(scores, f0)?;
    let (transition, sustain, report) = train(&corpus, &config)?;
    let metadata = ModelMetadata {
        seed: config.seed,
        config,
    };
    save_model(out_model, &transition, &sustain, &metadata)?;
    if let Some(path) = report_path {
        let mut text = serde_json::to_string_pretty(&report)
            .map_err(|e| CliError::Data(format!("report serialization: {e}")))?;
        text.push('\n');
        write_text(path, &text)?;
        write_text(&path.with_extension("csv"), &report.losses_csv())?;
    }
    for stage in &report.stages {
        if let (Some(first), Some(last)) = (stage.epoch_losses.first(), stage.epoch_losses.last()) {
            println!(
                "stage {}: loss {:.6} -> {:.6} over {} epochs ({:.1}s)",
                stage.stage,
                first,
                last,
                stage.epoch_losses.len(),
                stage.wall_time_s
            );
        }
    }
    println!("model written to {}", out_model.display());
    Ok(())
}

fn cmd_synth(
    score_path: &Path,
    model_path: &Path,
    out_f0: &Path,
    no_vibrato: bool,
) -> Result<(), CliError> {
    let score = read_score(score_path)?;
    let (transition, sustain, _) = load_model(model_path)?;
    let mode = if no_vibrato {
        VibratoMode::Disabled
    } else {
        VibratoMode::Defaults
    };
    let track = synthesize(&transition, &sustain, &score, None, mode)?;
    write_f0_track(out_f0, &track)?;
    println!(
        "wrote {} frames ({} voiced) to {}",
        track.grid.count,
        track.voiced.iter().filter(|&&v| v).count(),
        out_f0.display()
    );
    Ok(())
}

fn cmd_gen_synth(spec_path: Option<&Path>, out_dir: &Path) -> Result<(), CliError> {
    let spec: SyntheticSpec = match spec_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("{}: invalid spec: {e}", path.display())))?
        }
        None => SyntheticSpec::default(),
    };
    let (corpus, ground_truth) = generate_synthetic(&spec)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", out_dir.display())))?;
    for item in &corpus.items {
        write_score(
            &out_dir.join(format!("{}.score.json", item.id)),
            &item.score,
        )?;
        write_f0_track(&out_dir.join(format!("{}.f0.txt", item.id)), &item.target)?;
    }
    save_ground_truth(&out_dir.join("ground_truth.json"), &ground_truth)?;
    let mut spec_text =
        serde_json::to_string_pretty(&spec).map_err(|e| CliError::Data(e.to_string()))?;
    spec_text.push('\n');
    write_text(&out_dir.join("spec.json"), &spec_text)?;
    println!(
        "wrote {} songs to {}",
        corpus.items.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_estimate(
    scores: &[PathBuf],
    f0: &[PathBuf],
    model_path: &Path,
    out_csv: &Path,
) -> Result<(), CliError> {
    let corpus = load_corpus(scores, f0)?;
    let (transition, sustain, metadata) = load_model(model_path)?;
    let mut csv = String::from("song_id,note_index,detected,omega_rad_s,theta_rad,magnitude\n");
    let mut detected = 0usize;
    let mut total = 0usize;
    for item in &corpus.items {
        // Stored per-song offsets apply when the song was in the training
        // set; unseen songs run uncorrected.
        let offsets = transition.offsets.get(&item.id).cloned();
        let synth =
            synthesize_transition_only(&transition, &sustain, &item.score, offsets.as_deref())?;
        let res = residual(&item.target, &synth)?;
        let estimates = estimate_score(
            &res,
            &item.score,
            offsets.as_deref(),
            &metadata.config.estimator,
        )?;
        for e in &estimates {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                item.id, e.note_index, e.detected, e.omega, e.theta, e.magnitude
            ));
            total += 1;
            if e.detected {
                detected += 1;
            }
        }
    }
    write_text(out_csv, &csv)?;
    println!(
        "estimated {detected}/{total} notes with vibrato; CSV at {}",
        out_csv.display()
    );
    Ok(())
}

fn cmd_eval(
    score_path: &Path,
    f0_path: &Path,
    model_path: &Path,
    out_csv: &Path,
) -> Result<(), CliError> {
    let corpus = load_corpus(&[score_path.to_path_buf()], &[f0_path.to_path_buf()])?;
    let item = &corpus.items[0];
    let (transition, sustain, _) = load_model(model_path)?;
    let synth = synthesize(
        &transition,
        &sustain,
        &item.score,
        None,
        VibratoMode::Defaults,
    )?;
    let target = &item.target;
    let mut csv = String::from("time_s,target_semitones,synth_semitones,voiced\n");
    let mut abs_sum = 0.0;
    let mut voiced = 0usize;
    for f in 0..target.grid.count {
        let t = target.grid.time(f);
        csv.push_str(&format!(
            "{},{},{},{}\n",
            t,
            target.log_f0[f],
            synth.log_f0[f],
            u8::from(target.voiced[f])
        ));
        if target.voiced[f] {
            abs_sum += (synth.log_f0[f] - target.log_f0[f]).abs();
            voiced += 1;
        }
    }
    if voiced == 0 {
        return Err(CliError::Data(format!(
            "{}: no voiced frames to evaluate",
            f0_path.display()
        )));
    }
    write_text(out_csv, &csv)?;
    println!(
        "l1_semitones={} voiced_frames={voiced} csv={}",
        abs_sum / voiced as f64,
        out_csv.display()
    );
    Ok(())
}
