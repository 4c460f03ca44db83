//! Subword vocabulary transplantation.
//!
//! A downstream model gets its own task-specific subword vocabulary; rows for
//! tokens shared with the pretrained vocabulary are copied, and rows for
//! mismatched tokens are synthesized from the pretrained embeddings of their
//! morphologically similar tokens (subwords and hyperwords).
//!
//! Module map:
//!
//! * [`lexicon`]: tokens, vocabularies, corpora, embedding matrices
//! * [`segmentation`]: BPE learning and application
//! * [`morphset`]: similar-set construction with positional relations
//! * [`generators`]: averaging and attention-based embedding generators
//! * [`neural`]: a small masked-language-model encoder with manual backprop
//! * [`augment`]: split/merge augmentation producing unseen tokens
//! * [`distill`]: frozen-backbone generator training
//! * [`transplant`]: target embedding assembly and mismatch reports
//! * [`eval`]: granularity sweeps, downstream probes, synthetic benchmark

pub mod augment;
pub mod distill;
pub mod error;
pub mod eval;
pub mod generators;
pub mod lexicon;
pub mod morphset;
pub mod neural;
pub mod segmentation;
pub mod transplant;

mod rng;

pub use error::{Error, Result};
pub use lexicon::{build_vocabulary, Corpus, EmbeddingMatrix, Token, Vocabulary};
pub use segmentation::{learn_bpe, SegmentationModel, Segmented};
