//! Desk-scale object-concept-relation pipeline: a minimal reverse-mode
//! tensor engine, synthetic scenes, slot-attention object binding,
//! concept extraction with importance-based suppression, relational
//! reasoning on a concept graph, and two toy fine-tuning harnesses.

pub mod binding;
pub mod clip;
pub mod concept;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod sam;
pub mod scalar;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{OcrtError, Result};

/// Pipeline-default tensor: f64 scalars.
pub type Tensor = tensor::Tensor<f64>;
/// Single-precision alias for the generic numeric core.
pub type Tensor32 = tensor::Tensor<f32>;
