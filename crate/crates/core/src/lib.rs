//! Structured width reduction (pruning or folding) of feed-forward blocks,
//! followed by a closed-form ridge compensation that is merged into the
//! downstream weights.
//!
//! The pipeline per block is: capture the consumer-input activations on a
//! calibration batch, accumulate their Gram matrix, choose surviving units
//! with a [`selectors`] criterion, turn the choice into a reducer matrix
//! ([`reducers`]), and solve for the compensation map ([`compensation`]).
//! [`pipeline`] chains blocks in closed loop so every block is calibrated on
//! the outputs of its already-compressed predecessors.

pub mod calibration;
pub mod compensation;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod reducers;
pub mod rng;
pub mod selectors;
pub mod tensor;

pub use error::{FormatError, GrailError, Result};
pub use tensor::Tensor;
