//! Theory-of-mind frame localization over precomputed embeddings.
//!
//! The crate scores frames against questions, selects key frames, builds
//! composite-video ground truth, estimates per-frame influence with a
//! pluggable answer scorer and computes the accuracy metrics used to
//! evaluate all of the above.

pub mod composite;
pub mod datamodel;
pub mod evalkit;
pub mod influence;
pub mod relevance;
pub mod store;
pub mod synth;

pub use datamodel::{
    validate_corpus, CompositeVideo, Corpus, EmbeddingMatrix, InfluenceProfile, LocalizationLabel,
    Projector, QAItem, RelevanceMatrix, Segment, VideoManifest, Violation,
};
