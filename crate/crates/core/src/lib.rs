//! CTC transcription with inline event tags.
//!
//! A CTC vocabulary is extended with reserved placeholder tokens that get
//! bound to event tags (intents, typed entity begins, a shared entity END,
//! speaker changes). Emission matrices decode greedily into tagged token
//! sequences, which parse into structured transcripts and score with tuple
//! F1, WER and intent accuracy.

pub mod ctc;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod formats;
pub mod synth;
pub mod tag_parser;
pub mod vocab;

pub use error::{Error, Result};
