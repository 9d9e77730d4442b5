//! Joint extraction of radiological findings and normalized anatomical
//! information from report text.
//!
//! The crate implements two extraction systems over a shared trainable
//! sentence encoder, plus everything needed to exercise them end to end on a
//! synthetic corpus:
//!
//! - [`spanmodel`]: a span-based joint extractor that enumerates candidate
//!   token spans, classifies each against the full label set (null, Finding,
//!   and the anatomy subtypes), and classifies relations between the
//!   surviving spans.
//! - [`baseline`]: a multi-step tagger baseline that first predicts BIO tags
//!   per word piece and then classifies relations over marker-rewritten
//!   sentences.
//! - [`normalizer`]: normalization-only modes that predict the anatomy
//!   subtype of a gold phrase, with or without sentence context.
//! - [`corpus`] and [`schema`]: standoff-annotation ingestion, the label
//!   schema, deterministic splits, and corpus statistics.
//! - [`synth`]: a deterministic generator of annotated radiology-like
//!   documents used as ground truth.
//! - [`eval`]: exact-match and any-overlap scoring, micro-averaged F1,
//!   confusion pairs, recall by span length, run aggregation, and Welch's
//!   t-test.

pub mod baseline;
pub mod checkpoint;
pub mod corpus;
pub mod digest;
pub mod encoder;
pub mod eval;
pub mod graph;
pub mod normalizer;
pub mod optim;
pub mod params;
pub mod records;
pub mod schema;
pub mod spanmodel;
pub mod synth;
pub mod tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
