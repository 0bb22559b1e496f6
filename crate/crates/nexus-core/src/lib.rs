//! NEXUS: a compact neural architecture for spatiotemporal air quality
//! forecasting, with its full experimental pipeline — synthetic data
//! generation, quality control and alignment, supervised window
//! construction, training with ablations, and evaluation/analysis.

pub mod data;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use model::{ModelError, NexusConfig, NexusParams, OutputMode};
pub use tensor::{Array, DiffArray, Tape, TensorError};
