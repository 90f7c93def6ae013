//! Symmetric positive definite cost construction.
//!
//! The embedding is reshaped to a square matrix, the diagonal is passed
//! through `exp` and shifted by a small constant, all entries are clamped,
//! the strict upper triangle is zeroed, and the resulting triangular factor
//! `L` yields `Q = L L' + eps I`, symmetrized once more against rounding.
//! Every step runs on the tape, so the construction is differentiable end to
//! end (the clamp has zero gradient outside its band).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, NodeId, ParamStore, Tape};

/// Jitter added to the exponentiated diagonal and to `L L'`.
pub const DEFAULT_EPSILON: f64 = 1e-4;
/// Entry clamp preventing numerical explosion of the exponential.
pub const CLAMP_LIMIT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// Cost generated per input by the transformer encoder.
    Transformer,
    /// A single learned factor matrix, independent of the input.
    MatrixLearning,
    /// Identity cost; the optimization is non-learnable.
    Static,
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            VariantKind::Transformer => "transformer",
            VariantKind::MatrixLearning => "matrix-learning",
            VariantKind::Static => "static",
        };
        f.write_str(s)
    }
}

/// Tape nodes of one SPD construction.
#[derive(Debug, Clone, Copy)]
pub struct SpdNodes {
    /// Lower-triangular factor after exp/clamp/tril.
    pub factor: NodeId,
    /// The symmetric positive definite cost matrix.
    pub cost: NodeId,
}

/// Snapshot of a constructed cost matrix.
#[derive(Debug, Clone)]
pub struct SpdCost {
    pub cost: Matrix,
    pub factor: Matrix,
    pub epsilon: f64,
}

impl SpdCost {
    pub fn from_nodes(tape: &Tape, nodes: SpdNodes, epsilon: f64) -> Self {
        Self {
            cost: tape.value(nodes.cost).clone(),
            factor: tape.value(nodes.factor).clone(),
            epsilon,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            cost: Matrix::identity(n),
            factor: Matrix::identity(n),
            epsilon: 0.0,
        }
    }
}

/// Builds the SPD cost from a flat embedding node of perfect-square length.
pub fn build_spd(tape: &mut Tape, embedding: NodeId, epsilon: f64) -> Result<SpdNodes> {
    let len = tape.value(embedding).len();
    let n = (len as f64).sqrt().round() as usize;
    if n * n != len {
        return Err(Error::NotSquareEmbedding { len });
    }
    let square = tape.reshape(embedding, n, n)?;
    spd_from_square(tape, square, n, epsilon)
}

/// Steps shared with the matrix-learning variant: diagonal exp + shift,
/// clamp, lower-triangular mask, `L L' + eps I`, symmetrize.
pub fn spd_from_square(tape: &mut Tape, square: NodeId, n: usize, epsilon: f64) -> Result<SpdNodes> {
    let eye = Matrix::identity(n);
    let off_mask = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });

    let diag_only = tape.mask_apply(square, eye.clone())?;
    let diag_exp = tape.exp(diag_only);
    let diag_exp_only = tape.mask_apply(diag_exp, eye.clone())?;
    let off_only = tape.mask_apply(square, off_mask)?;
    let recombined = tape.add(off_only, diag_exp_only)?;
    let eps_eye = tape.constant(eye.scale(epsilon));
    let shifted = tape.add(recombined, eps_eye)?;

    let clamped = tape.clamp(shifted, -CLAMP_LIMIT, CLAMP_LIMIT);
    let factor = tape.tril(clamped);

    let factor_t = tape.transpose(factor);
    let gram = tape.matmul(factor, factor_t)?;
    let eps_eye2 = tape.constant(Matrix::identity(n).scale(epsilon));
    let jittered = tape.add(gram, eps_eye2)?;
    let jittered_t = tape.transpose(jittered);
    let sum = tape.add(jittered, jittered_t)?;
    let cost = tape.scale(sum, 0.5);

    Ok(SpdNodes { factor, cost })
}

/// Input-independent cost from a directly learned square parameter.
pub fn matrix_learning_spd(
    tape: &mut Tape,
    store: &ParamStore,
    param: usize,
    epsilon: f64,
) -> Result<SpdNodes> {
    let shape = store.value(param).shape();
    if shape.0 != shape.1 {
        return Err(Error::NotSquareEmbedding {
            len: shape.0 * shape.1,
        });
    }
    let leaf = tape.param(store, param);
    spd_from_square(tape, leaf, shape.0, epsilon)
}

/// Identity cost of size `n`; the non-learnable variant.
pub fn static_spd(n: usize) -> SpdCost {
    SpdCost::identity(n)
}

/// Ratio of squared diagonal mass to total squared mass,
/// `sum_i Q_ii^2 / (sum_ij Q_ij^2 + eps)`, always in `[0, 1)`.
pub fn diagonality(q: &Matrix, epsilon: f64) -> f64 {
    debug_assert_eq!(q.rows(), q.cols());
    let mut diag = 0.0;
    let mut total = 0.0;
    for i in 0..q.rows() {
        for j in 0..q.cols() {
            let v = q.get(i, j);
            total += v * v;
            if i == j {
                diag += v * v;
            }
        }
    }
    diag / (total + epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_embedding_exact_arithmetic() {
        let mut tape = Tape::new();
        let e = tape.constant(Matrix::zeros(1, 4));
        let nodes = build_spd(&mut tape, e, DEFAULT_EPSILON).unwrap();
        let l = tape.value(nodes.factor);
        let q = tape.value(nodes.cost);
        let c = 1.0 + DEFAULT_EPSILON;
        for i in 0..2 {
            for j in 0..2 {
                let expect_l = if i == j { c } else { 0.0 };
                assert_eq!(l.get(i, j), expect_l);
                let expect_q = if i == j { c * c + DEFAULT_EPSILON } else { 0.0 };
                assert_eq!(q.get(i, j), expect_q);
            }
        }
    }

    #[test]
    fn large_diagonal_saturates_at_clamp() {
        let mut tape = Tape::new();
        let e = tape.constant(Matrix::row(&[20.0, 0.0, 0.0, 0.0]));
        let nodes = build_spd(&mut tape, e, DEFAULT_EPSILON).unwrap();
        assert_eq!(tape.value(nodes.factor).get(0, 0), CLAMP_LIMIT);
    }

    #[test]
    fn non_square_length_rejected() {
        let mut tape = Tape::new();
        let e = tape.constant(Matrix::zeros(1, 5));
        assert!(matches!(
            build_spd(&mut tape, e, DEFAULT_EPSILON),
            Err(Error::NotSquareEmbedding { len: 5 })
        ));
    }

    #[test]
    fn output_is_exactly_symmetric() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let mut tape = Tape::new();
        let e = tape.constant(Matrix::from_fn(1, 36, |_, _| rng.gen_range(-3.0..3.0)));
        let nodes = build_spd(&mut tape, e, DEFAULT_EPSILON).unwrap();
        assert_eq!(tape.value(nodes.cost).asymmetry(), 0.0);
    }

    #[test]
    fn matrix_learning_zero_init_matches_zero_embedding() {
        let mut store = ParamStore::new();
        let p = store.add("factor", Matrix::zeros(3, 3));
        let mut tape = Tape::new();
        let via_param = matrix_learning_spd(&mut tape, &store, p, DEFAULT_EPSILON).unwrap();
        let e = tape.constant(Matrix::zeros(1, 9));
        let via_embed = build_spd(&mut tape, e, DEFAULT_EPSILON).unwrap();
        assert_eq!(tape.value(via_param.cost), tape.value(via_embed.cost));
    }

    #[test]
    fn static_is_identity() {
        let s = static_spd(3);
        assert_eq!(s.cost, Matrix::identity(3));
    }

    #[test]
    fn diagonality_reference_values() {
        let eye = Matrix::identity(2);
        let got = diagonality(&eye, 1e-4);
        assert!((got - 2.0 / (2.0 + 1e-4)).abs() < 1e-15);

        let ones = Matrix::raw(2, 2, vec![1.0; 4]);
        let got = diagonality(&ones, 1e-4);
        assert!((got - 2.0 / (4.0 + 1e-4)).abs() < 1e-15);

        assert_eq!(diagonality(&Matrix::zeros(2, 2), 1e-4), 0.0);
    }

    #[test]
    fn diagonality_invariant_under_transpose_and_permutation() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let q = Matrix::from_fn(5, 5, |_, _| rng.gen_range(-2.0..2.0));
        let base = diagonality(&q, 1e-4);
        assert!((diagonality(&q.transpose(), 1e-4) - base).abs() < 1e-15);

        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let permuted = Matrix::from_fn(5, 5, |i, j| q.get(perm[i], perm[j]));
        assert!((diagonality(&permuted, 1e-4) - base).abs() < 1e-15);
    }
}
