//! Dual implicit process reward models for multi-hop question answering
//! over knowledge graphs.
//!
//! Two outcome-trained scorers (one over knowledge-graph paths, one over
//! chain-of-thought steps) yield per-step rewards as differences of prefix
//! log-likelihood ratios. An iterative engine uses them for best-of-N
//! selection while building a reasoning path and CoT in lockstep.

pub mod cli;
pub mod cot;
pub mod error;
pub mod eval;
pub mod foundry;
pub mod generator;
pub mod kg;
pub mod lm;
pub mod pipeline;
pub mod prompts;
pub mod reasoning;
pub mod retrieval;
pub mod reward;
pub mod synth;
pub mod train;
pub mod util;

pub use error::{Error, Result};
