//! Quantization-aware training with scale-adjusted effective weights (SAT),
//! gradient-calibrated PACT activations, gradient-flow diagnostics and
//! batch-norm folding for integer inference.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a tape-based reverse-mode autodiff graph
//!   with custom backward rules.
//! - [`quant`]: DoReFa clamping, the `q_k` quantizer with a straight-through
//!   backward, constant / stddev rescaling and PACT.
//! - [`network`]: layers, blocks and the desk-scale model presets.
//! - [`diagnostics`]: the κ0/κ1/κ2 metrics, efficient-training rule checks
//!   and the weight-variance studies.
//! - [`training`]: config, datasets, SGD with Nesterov momentum, schedule
//!   and the train / evaluate loops.
//! - [`deployment`]: checkpoint container and BN folding into an
//!   integer-domain inference path.

pub mod deployment;
pub mod diagnostics;
mod error;
pub mod network;
pub mod quant;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, Tensor};
