//! Backend-facing half of the rpm personalization pipeline: the LLM
//! gateway with record/replay, the three pipeline stages (factor
//! construction, reasoning memory, reasoning-aligned inference), dataset
//! loading with chronological splits, and the evaluation harness.

pub mod dataset;
pub mod error;
pub mod factors;
pub mod gateway;
pub mod harness;
pub mod inference;
pub mod memory;
pub mod render;
pub mod testing;
