//! Vocabulary, samples, windowing, on-disk formats and the synthetic generator.

mod format;
mod sequence;
mod synthetic;
mod vocab;
mod window;

pub use format::{
    read_feature_file, read_manifest, read_sample_at, read_vocabulary_file, write_feature_file, write_manifest,
    write_vocabulary_file, ManifestEntry, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use sequence::{Dataset, FeatureSequence, ModalitySpec, IGNORE_LABEL};
pub use synthetic::{generate_split, generate_synthetic, sample_chain, SyntheticConfig, SyntheticDataset};
pub use vocab::{build_vocabulary, ActionVocabulary};
pub use window::{window_features, window_timestamps, FeatureStream, HistoryPolicy, Windowed};
