//! Singing-voice F0 trajectory generation from note-level scores.
//!
//! The library decomposes a log-F0 trajectory into note-transition segments
//! (dinotes) and sustained note interiors (mononotes), models each with a
//! small feed-forward network, and recombines them by enveloped summation.
//! Training runs a multi-stage gradient-descent schedule that also
//! back-propagates into selected network inputs: per-note onset offsets for
//! timing correction and per-note vibrato phase/warp parameters.
//!
//! Pitch is MIDI-scale semitones (`p = 69 + 12 log2(f/440)`) everywhere;
//! Hz conversion happens only at the file I/O boundary in [`dataio`].

pub mod dataio;
pub mod envelope;
pub mod nn;
pub mod score;
pub mod sustain;
pub mod synth;
pub mod train;
pub mod transition;
pub mod vibrato;

pub use dataio::{Corpus, CorpusItem, DataError, GroundTruth, ModelMetadata, SyntheticSpec};
pub use envelope::{F0Track, FrameGrid, Segment};
pub use nn::{Activation, AdamState, Gradients, Mlp};
pub use score::{Note, OnsetType, Score, Standardizer, SustainContext, TransitionContext};
pub use sustain::{NoteVibrato, SustainModel};
pub use synth::{synthesize, VibratoMode};
pub use train::{train, TrainConfig, TrainError, TrainReport};
pub use transition::{ModelError, TransitionModel};
