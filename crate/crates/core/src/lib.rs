//! MQM-style translation evaluation with an LLM: error annotation,
//! per-error automatic post-editing, pairwise verification of each
//! post-edit, and weighted error scoring. Includes the meta-evaluation
//! tools used to compare evaluation strategies against human judgements.

pub mod backend;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod metaeval;
pub mod mqm;
pub mod pipeline;
pub mod prompting;
pub mod report;

pub use error::{Error, Result};
