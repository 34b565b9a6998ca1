//! Core building blocks of the rpm personalization pipeline: the shared
//! domain model, prompt templates with structured-output parsing, the
//! retrieval strategies, factor statistics with greedy factor selection,
//! and evaluation metrics. Everything in this crate is pure and
//! deterministic; backend I/O lives in the pipeline crate.

pub mod domain;
pub mod embed;
pub mod factor;
pub mod metrics;
pub mod prompt;
pub mod retrieval;

pub use domain::Validate;
