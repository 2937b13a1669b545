//! LLM relevance pre-filtering for passage re-ranking.
//!
//! Candidates from a first-stage run are scored by a prompted LLM, a
//! relevance threshold is calibrated against a sample of graded judgments
//! by maximizing F1, passages under the threshold are dropped, and the
//! survivors are re-ranked with a sliding-window listwise prompt.

pub mod calibration;
pub mod error;
pub mod gateway;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod prefilter;
pub mod rerank;
pub mod scoring;
pub mod trec_io;

pub use error::{Error, Result};
