//! Clause recommendation for contract drafting: clause-type relevance,
//! clause retrieval and conditional clause generation.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generator;
pub mod nn;
pub mod relevance;
pub mod retriever;
pub mod synth;

pub use error::{Error, Result};
