//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix construction: expected {rows}x{cols} = {expected} entries, got {got}")]
    BadLength {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },
    #[error("not positive definite: pivot {pivot} is non-positive ({value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("singular triangular system: zero diagonal at index {index}")]
    SingularTriangular { index: usize },
    #[error("singular linear system at elimination step {step}")]
    SingularSystem { step: usize },
    #[error("backward root must be scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("QP did not converge in {max_iter} iterations: residual {residual:.3e} > tol {tol:.3e}")]
    QpNonConvergence {
        max_iter: usize,
        residual: f64,
        tol: f64,
    },
    #[error("QP instance in batch slot {index} failed: {source}")]
    QpBatch {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid bounds: lower {lo} >= upper {hi} at dimension {dim}")]
    InvalidBounds { dim: usize, lo: f64, hi: f64 },
    #[error("selection is empty: nothing to optimize")]
    EmptySelection,
    #[error("invalid selection index {index} for action dimension {dim}")]
    BadSelectionIndex { index: usize, dim: usize },
    #[error("duplicate selection index {index}")]
    DuplicateSelectionIndex { index: usize },
    #[error("chunk too short: length {len}, need at least {need}")]
    ChunkTooShort { len: usize, need: usize },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("inference assembly requires a previous action")]
    MissingPrevAction,
    #[error("embedding length {len} is not a perfect square")]
    NotSquareEmbedding { len: usize },
    #[error("encoder config: embed dim {embed} not divisible by {heads} heads")]
    BadHeadSplit { embed: usize, heads: usize },
    #[error("series too short: {len} samples for derivative order {order}")]
    SeriesTooShort { len: usize, order: usize },
    #[error("waypoint outside the unit workspace: {value} at dimension {dim}")]
    InfeasibleWaypoint { dim: usize, value: f64 },
    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },
    #[error("bound schedule invalid: {reason}")]
    BadSchedule { reason: String },
    #[error("variant has no trainable parameters")]
    NotTrainable,
    #[error("checkpoint format: {reason}")]
    BadCheckpoint { reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
