//! Zero-shot dense retrieval with LLM relevance feedback.
//!
//! A query is first answered by a sparse, dense or fused retriever. An LLM
//! judge then labels the top candidates, and the query embedding is replaced
//! by the mean of itself and the embeddings of the documents judged relevant.
//! Hypothetical-document expansion and pseudo relevance feedback are provided
//! as baselines.

pub mod corpus;
pub mod dense;
pub mod error;
pub mod eval;
pub(crate) mod exec;
pub mod hybrid;
pub mod hyde;
pub mod judge;
pub mod llm;
pub mod pipeline;
pub mod sparse;
pub mod templates;

pub use error::{Error, Result};
