//! Dense matrix arithmetic and a minimal reverse-mode differentiation tape.

pub mod linalg;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod tape;

pub use linalg::{cholesky_solve, cholesky_spd, lu_solve, solve_triangular, Side};
pub use matrix::{dot, euclidean_norm, inf_norm, Matrix};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamStore, Parameter};
pub use tape::{Axis, CustomOp, GradMap, NodeId, Tape};
