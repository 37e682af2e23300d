//! Explainable grammatical error correction: corpora with evidence
//! annotations, edit alignment, a pointer-augmented encoder-decoder that
//! corrects, points at evidence and classifies the error, constrained
//! decoding, and edit/evidence metrics.

pub mod align;
pub mod codec;
pub mod corpus;
pub mod denoise;
pub mod error;
pub mod exec;
pub mod harness;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
