//! Sequential skip prediction: session data pipeline, synthetic data,
//! metric-learning and sequence-learning models, training, and evaluation.

pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
