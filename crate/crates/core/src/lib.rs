//! Hierarchical multi-label generation under per-level vocabulary constraints.
//!
//! The crate turns a taxonomy into a sub-word label vocabulary, trains a small
//! encoder-decoder to generate label strings one taxonomy level at a time,
//! masks each level's output distribution to the tokens of that level's
//! labels, filters generated strings against the taxonomy, places unknown
//! strings into the hierarchy, and scores predictions.

pub mod codec;
pub mod decoder;
pub mod discovery;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod plc;
pub mod taxonomy;

pub use codec::{LabelVocabulary, TokenId, BOS, EOS, SEP, UNK};
pub use model::{Document, EncodedMemory, ModelConfig, ModelParams};
pub use plc::LevelMaskSet;
pub use taxonomy::{Label, Taxonomy};
