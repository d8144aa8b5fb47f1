//! Reference-free hallucination detection for long-form LLM output.
//!
//! Responses are decomposed into atomized claims ([`claims`]), each claim is
//! scored by token-level confidence estimators ([`estimators`]), prompting
//! and fine-tuned detectors ([`detectors`]) or a hidden-state probe
//! ([`probe`]), and scores are turned into decisions and reports by
//! [`eval`]. [`finetune`] emits instruction-tuning datasets in
//! label-rationale format with auxiliary QA examples.

pub mod claims;
pub mod detectors;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod finetune;
pub mod gateway;
pub mod jsonl;
pub mod manifest;
pub mod model;
pub mod probe;

pub use error::{Error, Result};
pub use model::*;
