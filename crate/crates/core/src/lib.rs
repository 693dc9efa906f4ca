//! Heterogeneous-graph transformer for news credibility classification.
//!
//! The pipeline samples each news node's propagation neighborhood with a
//! random walk with restart, encodes the multi-modal content of every sampled
//! node, aggregates the typed neighbor sequence with an encoder-decoder
//! transformer and classifies the news node as fake or real.

pub mod embstore;
pub mod graph;
pub mod rwr;
pub mod synth;
pub mod tensor;
pub mod content;
pub mod error;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod train;
pub mod transformer;

pub use error::{Error, ModelError, Result};
