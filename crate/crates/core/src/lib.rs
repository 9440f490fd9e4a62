//! Siamese convolutional title matching for style-compatible item recommendation.
//!
//! Item titles are mapped by a shared convolutional sentence encoder into an
//! `n`-dimensional representation; a bilinear head `σ(x_qᵀ M x_c + b)` turns a
//! pair of representations into a compatibility probability. Serving reduces
//! top-K compatibility ranking to exact maximum inner product search against
//! `x'_q = Mᵀ x_q`.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: item catalogs, relationship pairs, vocabulary, negative sampling and splits
//! - [`nnops`]: differentiable primitives (wide convolution, ReLU, k-max pooling, dense, dropout)
//! - [`sentmodel`]: the sentence encoder built from those primitives
//! - [`compat`]: the bilinear compatibility head and the full Siamese model
//! - [`trainer`]: Adagrad mini-batch training with early stopping
//! - [`checkpoint`]: the binary model format
//! - [`recommend`]: style index export and exact top-K retrieval
//! - [`synth`]: a seeded synthetic dataset generator
//! - [`cli`]: the command-line front end

pub mod checkpoint;
pub mod cli;
pub mod compat;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod nnops;
pub mod real;
pub mod recommend;
pub mod rng;
pub mod sentmodel;
pub mod synth;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use compat::{CompatibilityParams, ModelGrads, StyleModel};
pub use corpus::{DatasetSplit, ItemCatalog, PairExample, Vocabulary};
pub use error::{Error, Result};
pub use nnops::{FeatureMatrix, Mode};
pub use real::Real;
pub use recommend::{StyleIndex, TransformedQuery};
pub use sentmodel::{EncoderHyperParams, EncoderParams, InitScales, LevelSpec};
pub use trainer::{TrainConfig, TrainHistory, TrainOutcome};
