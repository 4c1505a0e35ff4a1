//! Condensing routed Mixture-of-Experts layers into small dense layers.
//!
//! A routed MoE layer picks the top-K of N experts per token. Condensing a
//! layer drops its router, keeps a few experts with fixed gates estimated on
//! calibration data, and runs them (plus the shared experts) on every token.
//! Greedy searches decide which experts to keep and which layers to condense;
//! a short fine-tune of the condensed layers then recovers most of the loss.

pub mod checkpoint;
pub mod condense;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod selection;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
