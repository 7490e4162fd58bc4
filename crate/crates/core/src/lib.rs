//! Entity-tagged transcript toolkit for joint speech recognition and
//! open-type named entity recognition.
//!
//! - [`codec`]: span-marker (`<label>text<label>>`) and BIO (`word(B-label)`)
//!   grammars over a shared [`codec::TaggedTranscript`].
//! - [`dataset`]: JSONL records and BIO column-corpus import.
//! - [`augment`]: negative sampling, entity-type dropout, prompt shuffling and
//!   balanced evaluation prompts.
//! - [`metrics`]: WER, strict entity F1, hallucination rate and sequence-length
//!   analysis.
//! - [`decode`]: greedy decoding over a pluggable token model with an
//!   entity-start logit bias, prompt-constrained emission and bias sweeps.
//! - [`plot`]: SVG precision/recall and sequence-length charts.
//! - [`manifest`]: per-run records of arguments, seeds and file digests.

pub mod augment;
pub mod codec;
pub mod dataset;
pub mod decode;
pub mod manifest;
pub mod metrics;
pub mod plot;
pub mod prompt;

pub use codec::{EntitySpan, ParseMode, TagScheme, TaggedTranscript};
pub use dataset::{Dataset, DatasetRecord};
pub use prompt::{Polarity, PromptEntry, PromptSpec};
