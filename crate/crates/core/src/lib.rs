//! Differentiable constrained trajectory optimization.
//!
//! A strictly convex QP refines chunked action trajectories to satisfy hard
//! derivative bounds while staying close to the input; the quadratic cost is
//! produced by a trainable encoder and the whole layer backpropagates through
//! the solver's KKT conditions. The crate also ships the post-hoc baselines
//! (greedy clipping, penalty descent, residual correction), the trajectory
//! metric suite, and a synthetic demonstration environment so every claimed
//! property is testable without robot benchmarks.

pub mod baselines;
pub mod diffog;
pub mod encoder;
pub mod experiments;
pub mod error;
pub mod io;
pub mod metrics;
pub mod qp;
pub mod spd;
pub mod synth;
pub mod tensor;
pub mod trajectory;

pub use error::{Error, Result};
