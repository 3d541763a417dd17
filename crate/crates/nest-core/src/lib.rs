//! Semi-parametric text generation over a passage corpus.
//!
//! A generation request retrieves passages once (hybrid sparse/dense search
//! with confidence-weighted fusion), encodes them into a token-level
//! key-value store, and then decodes greedily from a mixture of the model
//! distribution and a nearest-neighbor token distribution. High retrieval
//! confidence promotes whole corpus spans into the output; a relaxed
//! acceptance test trims each span to the prefix the mixture supports, and
//! every copied token keeps a pointer to its source.

pub mod corpus;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod lm;
pub mod mixture;
pub mod retrieval;
pub mod synth;
pub mod threads;
pub mod token_store;
pub mod tokenizer;

pub use error::{NestError, Result};
