//! Continuous word-sized token language modelling on synthetic speech.
//!
//! Pipeline: [`corpus`] generates utterances with known transcriptions,
//! [`tokenize`] turns spans into acoustic tokens, [`quantize`] applies the
//! PCA + per-dimension k-means bottleneck, [`model`] trains the lexical
//! embedder and causal transformer with a contrastive loss, [`sample`]
//! generates by k-NN sampling in the lexical space, and [`eval`] scores
//! everything. [`pipeline`] stitches the stages together with caching.

pub mod autograd;
pub mod container;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod quantize;
pub mod rng;
pub mod sample;
pub mod tokenize;

pub use error::{Error, Result};
