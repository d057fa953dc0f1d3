//! Span-based aspect sentiment triplet extraction with dual-channel encoding,
//! syntactic and semantic word graphs and a heterogeneous feature
//! interaction module.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod evaluation;
pub mod graphs;
pub mod hfim;
pub mod model;
pub mod params;
pub mod separation;
pub mod spans;
pub mod tokenizer;
pub mod training;
pub mod triplet;

pub use candle_core::Device;
pub use config::{Ablation, RunConfig};
pub use corpus::{Polarity, Sentence, Span, Triplet};
pub use evaluation::{score, EvalReport};
pub use model::Extractor;

/// Directory of the bundled ten-sentence fixture.
pub fn fixture_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy")
}
