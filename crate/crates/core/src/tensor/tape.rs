//! Define-by-run reverse-mode differentiation tape.
//!
//! Every operation records a node; `backward` walks the nodes once in
//! reverse creation order and accumulates adjoints. The tape is rebuilt per
//! training step, which keeps the custom solver node (see the QP layer) a
//! plain `CustomOp` implementation instead of a graph-surgery problem.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

use super::matrix::Matrix;
use super::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// An operation with a hand-written backward rule, injected into the tape
/// from outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Maps the output adjoint to one adjoint per input, given the recorded
    /// input values.
    fn backward(&self, adjoint: &Matrix, inputs: &[&Matrix]) -> Result<Vec<Matrix>>;
}

enum Op {
    Constant,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Exp(NodeId),
    Tanh(NodeId),
    RowSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    MaskApply {
        x: NodeId,
        mask: Matrix,
    },
    Reshape(NodeId),
    Tril(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Transpose(NodeId),
    Scale {
        x: NodeId,
        factor: f64,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: Axis,
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    op: Op,
    value: Matrix,
    adjoint: Option<Matrix>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Gradients keyed by parameter index, as produced by `Tape::backward`.
#[derive(Debug, Default)]
pub struct GradMap {
    by_param: HashMap<usize, Matrix>,
}

impl GradMap {
    pub fn get(&self, param: usize) -> Option<&Matrix> {
        self.by_param.get(&param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Matrix)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    fn accumulate(&mut self, param: usize, grad: &Matrix) {
        match self.by_param.get_mut(&param) {
            Some(existing) => *existing = existing.add(grad).expect("param grad shape"),
            None => {
                self.by_param.insert(param, grad.clone());
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            adjoint: None,
        });
        id
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// Leafs a parameter's current value onto the tape.
    pub fn param(&mut self, store: &ParamStore, index: usize) -> NodeId {
        self.push(Op::Param(index), store.value(index).clone())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), value)
    }

    pub fn row_softmax(&mut self, x: NodeId) -> NodeId {
        let input = self.value(x);
        let (rows, cols) = input.shape();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let row = input.row_slice(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let mut denom = 0.0;
            for j in 0..cols {
                let e = (row[j] - max).exp();
                out.set(i, j, e);
                denom += e;
            }
            for j in 0..cols {
                out.set(i, j, out.get(i, j) / denom);
            }
        }
        self.push(Op::RowSoftmax(x), out)
    }

    /// Row-wise normalization followed by a learned per-column affine map.
    /// `gain` and `bias` are `1 x cols`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(x).shape();
        for aff in [gain, bias] {
            if self.value(aff).shape() != (1, cols) {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: (rows, cols),
                    right: self.value(aff).shape(),
                });
            }
        }
        let normalized = layer_norm_rows(self.value(x));
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out.set(
                    i,
                    j,
                    normalized.get(i, j) * self.value(gain).get(0, j) + self.value(bias).get(0, j),
                );
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias }, out))
    }

    /// Elementwise multiplication by a constant mask. Dropout applies its
    /// inverted keep-mask through this; Algorithm-style diagonal masking
    /// reuses it directly.
    pub fn mask_apply(&mut self, x: NodeId, mask: Matrix) -> Result<NodeId> {
        let value = self.value(x).hadamard(&mask)?;
        Ok(self.push(Op::MaskApply { x, mask }, value))
    }

    /// Inverted dropout with a caller-seeded RNG; identity at rate 0.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut impl Rng) -> Result<NodeId> {
        if rate == 0.0 {
            return Ok(x);
        }
        let (rows, cols) = self.value(x).shape();
        let keep = 1.0 - rate;
        let mask = Matrix::from_fn(rows, cols, |_, _| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.mask_apply(x, mask)
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let value = self.value(x).reshape(rows, cols)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    /// Zeroes the strict upper triangle; gradient is zero there too.
    pub fn tril(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).tril();
        self.push(Op::Tril(x), value)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.value(x).clamp_values(lo, hi);
        self.push(Op::Clamp { x, lo, hi }, value)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).transpose();
        self.push(Op::Transpose(x), value)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.value(x).scale(factor);
        self.push(Op::Scale { x, factor }, value)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId> {
        debug_assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape();
        let mut rows = first.0;
        let mut cols = first.1;
        for &p in &parts[1..] {
            let shape = self.value(p).shape();
            match axis {
                Axis::Rows => {
                    if shape.1 != cols {
                        return Err(Error::ShapeMismatch {
                            op: "concat",
                            left: (rows, cols),
                            right: shape,
                        });
                    }
                    rows += shape.0;
                }
                Axis::Cols => {
                    if shape.0 != rows {
                        return Err(Error::ShapeMismatch {
                            op: "concat",
                            left: (rows, cols),
                            right: shape,
                        });
                    }
                    cols += shape.1;
                }
            }
        }
        let mut out = Matrix::zeros(rows, cols);
        match axis {
            Axis::Rows => {
                let mut at = 0;
                for &p in parts {
                    let v = self.value(p);
                    for i in 0..v.rows() {
                        for j in 0..cols {
                            out.set(at + i, j, v.get(i, j));
                        }
                    }
                    at += v.rows();
                }
            }
            Axis::Cols => {
                let mut at = 0;
                for &p in parts {
                    let v = self.value(p);
                    for i in 0..rows {
                        for j in 0..v.cols() {
                            out.set(i, at + j, v.get(i, j));
                        }
                    }
                    at += v.cols();
                }
            }
        }
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            out,
        ))
    }

    /// Records a node whose backward rule is supplied by the caller.
    pub fn custom(&mut self, inputs: &[NodeId], op: Box<dyn CustomOp>, value: Matrix) -> NodeId {
        self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            value,
        )
    }

    /// Sum of squared entries as a 1x1 node, composed from reshape and
    /// matmul so no extra primitive is needed.
    pub fn sum_squares(&mut self, x: NodeId) -> Result<NodeId> {
        let len = self.value(x).len();
        let flat = self.reshape(x, len, 1)?;
        let flat_t = self.transpose(flat);
        self.matmul(flat_t, flat)
    }

    /// Repeats a `1 x c` row `n` times via multiplication with a constant
    /// ones column; the gradient collapses back onto the row.
    pub fn broadcast_rows(&mut self, row: NodeId, n: usize) -> Result<NodeId> {
        let ones = self.constant(Matrix::raw(n, 1, vec![1.0; n]));
        self.matmul(ones, row)
    }

    /// Reverse sweep from a scalar root. Returns one gradient per parameter
    /// reachable from the root; callers treat missing entries as zero.
    pub fn backward(&mut self, root: NodeId) -> Result<GradMap> {
        let root_shape = self.value(root).shape();
        if root_shape != (1, 1) {
            return Err(Error::NonScalarRoot {
                rows: root_shape.0,
                cols: root_shape.1,
            });
        }
        for node in &mut self.nodes {
            node.adjoint = None;
        }
        self.nodes[root.0].adjoint = Some(Matrix::identity(1));

        let mut grads = GradMap::default();
        for idx in (0..self.nodes.len()).rev() {
            let adjoint = match self.nodes[idx].adjoint.take() {
                Some(a) => a,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param(p) => grads.accumulate(*p, &adjoint),
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = adjoint.matmul(&self.nodes[b.0].value.transpose())?;
                    let db = self.nodes[a.0].value.transpose().matmul(&adjoint)?;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, adjoint.clone());
                    self.accumulate(b, adjoint);
                }
                Op::Exp(x) => {
                    let x = *x;
                    let grad = adjoint.hadamard(&self.nodes[idx].value)?;
                    self.accumulate(x, grad);
                }
                Op::Tanh(x) => {
                    let x = *x;
                    let grad = adjoint.hadamard(&self.nodes[idx].value.map(|t| 1.0 - t * t))?;
                    self.accumulate(x, grad);
                }
                Op::RowSoftmax(x) => {
                    let x = *x;
                    let y = &self.nodes[idx].value;
                    let (rows, cols) = y.shape();
                    let mut grad = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        let mut inner = 0.0;
                        for j in 0..cols {
                            inner += adjoint.get(i, j) * y.get(i, j);
                        }
                        for j in 0..cols {
                            grad.set(i, j, y.get(i, j) * (adjoint.get(i, j) - inner));
                        }
                    }
                    self.accumulate(x, grad);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let input = &self.nodes[x.0].value;
                    let gain_v = self.nodes[gain.0].value.clone();
                    let normalized = layer_norm_rows(input);
                    let (rows, cols) = input.shape();

                    let mut dgain = Matrix::zeros(1, cols);
                    let mut dbias = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            dgain.set(
                                0,
                                j,
                                dgain.get(0, j) + adjoint.get(i, j) * normalized.get(i, j),
                            );
                            dbias.set(0, j, dbias.get(0, j) + adjoint.get(i, j));
                        }
                    }

                    let mut dx = Matrix::zeros(rows, cols);
                    let inv_c = 1.0 / cols as f64;
                    for i in 0..rows {
                        let row = input.row_slice(i);
                        let mean = row.iter().sum::<f64>() * inv_c;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_c;
                        let sigma = (var + LAYER_NORM_EPS).sqrt();
                        let mut dnorm = vec![0.0; cols];
                        for j in 0..cols {
                            dnorm[j] = adjoint.get(i, j) * gain_v.get(0, j);
                        }
                        let dnorm_mean = dnorm.iter().sum::<f64>() * inv_c;
                        let dnorm_dot = (0..cols)
                            .map(|j| dnorm[j] * normalized.get(i, j))
                            .sum::<f64>()
                            * inv_c;
                        for j in 0..cols {
                            let v = (dnorm[j] - dnorm_mean - normalized.get(i, j) * dnorm_dot)
                                / sigma;
                            dx.set(i, j, v);
                        }
                    }
                    self.accumulate(x, dx);
                    self.accumulate(gain, dgain);
                    self.accumulate(bias, dbias);
                }
                Op::MaskApply { x, mask } => {
                    let x = *x;
                    let grad = adjoint.hadamard(mask)?;
                    self.accumulate(x, grad);
                }
                Op::Reshape(x) => {
                    let x = *x;
                    let (rows, cols) = self.nodes[x.0].value.shape();
                    let grad = adjoint.reshape(rows, cols)?;
                    self.accumulate(x, grad);
                }
                Op::Tril(x) => {
                    let x = *x;
                    self.accumulate(x, adjoint.tril());
                }
                Op::Clamp { x, lo, hi } => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    let input = &self.nodes[x.0].value;
                    let (rows, cols) = input.shape();
                    let mut grad = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            let v = input.get(i, j);
                            if v >= lo && v <= hi {
                                grad.set(i, j, adjoint.get(i, j));
                            }
                        }
                    }
                    self.accumulate(x, grad);
                }
                Op::Transpose(x) => {
                    let x = *x;
                    self.accumulate(x, adjoint.transpose());
                }
                Op::Scale { x, factor } => {
                    let (x, factor) = (*x, *factor);
                    self.accumulate(x, adjoint.scale(factor));
                }
                Op::Concat { parts, axis } => {
                    let parts = parts.clone();
                    let axis = *axis;
                    let mut at = 0;
                    for p in parts {
                        let (pr, pc) = self.nodes[p.0].value.shape();
                        let piece = match axis {
                            Axis::Rows => {
                                Matrix::from_fn(pr, pc, |i, j| adjoint.get(at + i, j))
                            }
                            Axis::Cols => {
                                Matrix::from_fn(pr, pc, |i, j| adjoint.get(i, at + j))
                            }
                        };
                        at += match axis {
                            Axis::Rows => pr,
                            Axis::Cols => pc,
                        };
                        self.accumulate(p, piece);
                    }
                }
                Op::Custom { inputs, op } => {
                    let inputs = inputs.clone();
                    let values: Vec<&Matrix> =
                        inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                    let input_grads = op.backward(&adjoint, &values)?;
                    debug_assert_eq!(input_grads.len(), inputs.len());
                    for (input, grad) in inputs.into_iter().zip(input_grads) {
                        self.accumulate(input, grad);
                    }
                }
            }
        }
        Ok(grads)
    }

    fn accumulate(&mut self, id: NodeId, grad: Matrix) {
        let node = &mut self.nodes[id.0];
        node.adjoint = Some(match node.adjoint.take() {
            Some(existing) => existing.add(&grad).expect("adjoint shape"),
            None => grad,
        });
    }
}

fn layer_norm_rows(x: &Matrix) -> Matrix {
    let (rows, cols) = x.shape();
    let inv_c = 1.0 / cols as f64;
    Matrix::from_fn(rows, cols, |i, j| {
        let row = x.row_slice(i);
        let mean = row.iter().sum::<f64>() * inv_c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_c;
        (x.get(i, j) - mean) / (var + LAYER_NORM_EPS).sqrt()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::params::ParamStore;

    #[test]
    fn sum_of_squares_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Matrix::column(&[3.0, 4.0]));
        let mut tape = Tape::new();
        let leaf = tape.param(&store, p);
        let root = tape.sum_squares(leaf).unwrap();
        assert_eq!(tape.value(root).get(0, 0), 25.0);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[6.0, 8.0]);
    }

    #[test]
    fn constant_root_gives_no_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Matrix::column(&[1.0, 2.0]));
        let mut tape = Tape::new();
        let _leaf = tape.param(&store, p);
        let root = tape.constant(Matrix::identity(1));
        let grads = tape.backward(root).unwrap();
        assert!(grads.get(p).is_none());
        store.zero_grad();
        store.accumulate(&grads, 1.0);
        assert!(store.grad(p).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::zeros(2, 2));
        assert!(matches!(
            tape.backward(c),
            Err(Error::NonScalarRoot { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn row_softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row(&[0.0, 0.0]));
        let y = tape.row_softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn dropout_deterministic_per_seed() {
        use rand::SeedableRng;
        let run = |seed: u64| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.constant(Matrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64));
            let d = tape.dropout(x, 0.5, &mut rng).unwrap();
            tape.value(d).data().to_vec()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn clamp_gradient_zero_outside_band() {
        let mut store = ParamStore::new();
        let p = store.add("p", Matrix::column(&[15.0, -12.0, 3.0]));
        let mut tape = Tape::new();
        let leaf = tape.param(&store, p);
        let clamped = tape.clamp(leaf, -10.0, 10.0);
        let root = tape.sum_squares(clamped).unwrap();
        let grads = tape.backward(root).unwrap();
        // Saturated entries get zero gradient; the interior one gets 2x.
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0, 6.0]);
    }
}
