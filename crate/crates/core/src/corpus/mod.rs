//! Dataset ingestion, acoustic features, noise augmentation and the
//! synthetic toy corpus.

mod features;
mod manifest;
mod noise;
mod toy;

pub use features::{
    extract_features, hann_window, mel_centers_hz, mel_filterbank, FeatureConfig, FeatureMatrix,
    Waveform,
};
pub use manifest::{read_features, write_features, Manifest, Utterance, SCHEMA_VERSION};
pub use noise::{mix_noise_at_snr, mix_noise_detailed, noise_gain_for_snr, Mixture, NoiseFit};
pub use toy::{synth_toy_corpus, ToyCorpusConfig, ToyLexicon};
