//! varmt: a desk-scale toolkit for machine translation into pairs of
//! closely related language varieties.
//!
//! The crate covers the full path from raw parallel text to scored
//! translations:
//!
//! - [`corpus`]: ingestion, tokenization, length filtering, and
//!   partitioning into supervised / unsupervised / semi-supervised pools.
//! - [`translit`]: Serbian Cyrillic to Latin transliteration.
//! - [`subword`]: shared byte-pair-encoding subword model.
//! - [`varietyid`]: linear n-gram variety classifiers and the five-member
//!   ensemble with soft fusion and majority-with-abstention voting.
//! - [`recipes`]: assembly of training sets for the seven system
//!   configurations (generic, variety-specific, adapted, multilingual, and
//!   the three auto-labeling strategies), including variety-token tagging.
//! - [`nmt`]: a from-scratch transformer encoder-decoder in 64-bit floats
//!   with exact gradients, deterministic training, and beam decoding.
//! - [`eval`]: corpus BLEU, paired bootstrap significance, and the
//!   variety-consistency score.
//! - [`synth`]: synthetic two-variety corpus generation with a
//!   ground-truth variant table, so end-to-end claims are checkable.
//!
//! Everything is deterministic given explicit seeds: reruns produce
//! bit-identical models, translations, and reports.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod nmt;
pub mod recipes;
pub mod subword;
pub mod synth;
pub mod translit;
pub mod util;
pub mod varietyid;

pub use error::{Error, Result};
