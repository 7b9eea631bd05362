//! Single-stage structured pruning of a small transformer encoder.

pub mod checkpoint;
pub mod compactor;
pub mod controller;
pub mod error;
pub mod fabric;
pub mod gradcheck;
pub mod hard_concrete;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
