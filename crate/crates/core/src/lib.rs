//! Neural passage re-ranking laboratory.
//!
//! BM25 candidate generation, frequency-thresholded word vocabularies and
//! subword embeddings, three trainable neural re-rankers (KNRM, CONV-KNRM,
//! MatchPyramid) on a small hand-differentiated tensor core, and the
//! evaluation tooling for re-ranking-threshold sweeps and low-frequency
//! query analysis.

pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod firststage;
pub mod nn;
pub mod rankers;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
