//! Regional-attention image captioning from scratch.
//!
//! A windowed-attention vision encoder produces a grid of region features; a
//! learned regional attention weights, projects and pools them into a fixed
//! number of tokens; a causal transformer decoder generates captions from
//! those tokens with beam search. Everything runs on a small double-precision
//! tensor library with reverse-mode autodiff, so every gradient can be checked
//! against finite differences.

pub mod beam;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod regional;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Rng, Tape, Tensor, Var};
