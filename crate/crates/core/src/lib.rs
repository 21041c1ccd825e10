//! Local-learning engine: HFF dense and convolutional layers with per-layer
//! prototype objectives, a forward-forward baseline, training, evaluation and
//! inference benchmarking.

// Negated comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablate;
pub mod artifact;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{HffError, Result};
