//! File formats and persistence: WAV audio, run configuration,
//! checkpoints, and dataset layout/synthesis.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod wav;

pub use checkpoint::{checkpoint_load, checkpoint_save};
pub use config::{Precision, RunConfig};
pub use dataset::{
    decode_pairs, load_dir, synth_dataset, DatasetManifest, PairEntry, SynthOptions,
};
pub use wav::{wav_read, wav_write};
