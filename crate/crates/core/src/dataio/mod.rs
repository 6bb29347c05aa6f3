//! Embedding files, manifests, class splits, episode sampling and synthetic data.

pub mod emb;
pub mod episode;
pub mod manifest;
pub mod synth;

pub use emb::{load_emb, read_emb, write_emb, EmbeddingSet};
pub use episode::{sample_episode, Episode, DEFAULT_SHOTS};
pub use manifest::{DatasetManifest, SplitJson, SplitSpec};
pub use synth::{synth_gaussian, SynthGenerator, SynthParams};
