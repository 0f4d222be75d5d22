//! Domain-invariant synthetic dataset generation and small-model training.
//!
//! Pipeline stages, each in its own module:
//!
//! * [`generator`]: label-conditioned generation from a causal LM
//! * [`relabel`]: verbalizer-based soft pseudo-labels and confidence filter
//! * [`weighting`]: bi-level sample weights and top-weight selection
//! * [`trainer`]: cross-entropy + supervised contrastive training with a
//!   momentum encoder and a weight-gated memory bank
//! * [`eval`]: multi-domain evaluation, prompting baseline, 2-D projection
//! * [`pipeline`]: config-driven orchestration of all of the above

pub mod autograd;
pub mod config;
pub mod data;
pub mod eval;
pub mod error;
pub mod generator;
pub mod lexicon;
pub mod pipeline;
pub mod relabel;
pub mod seed;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
