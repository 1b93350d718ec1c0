//! Coarse-to-fine document-grounded dialogue.
//!
//! A dialogue context is answered in three stages: a bi-encoder retrieves
//! candidate passages by exact inner product, a cross-encoder reranks them,
//! and a seq2seq model reads the top passages in one flat input to emit the
//! grounding span and the answer.

pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod jsonl;
pub mod nn;
pub mod refine;
pub mod reranker;
pub mod retriever;
pub mod service;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
