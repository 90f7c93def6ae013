//! Trajectory algebra: action chunks, dimension selection, finite
//! differencing, and assembly of the constrained refinement QP.
//!
//! The assembled problem is
//!
//! ```text
//!     minimize    1/2 y' (Q + alpha S' A' A S) y - a' y
//!     subject to  d_min dt <= c_{k+1} - c_k <= d_max dt        (c = S y)
//! ```
//!
//! with optional first-step linking rows against the previously executed
//! action (inference) and optional direct value bounds on the selected
//! dimensions. The sign of the linear term makes `Q = I`, `alpha = 0` the
//! identity transformation on feasible inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::QpInstance;
use crate::tensor::Matrix;

/// A chunk of `horizon` consecutive actions of dimension `action_dim`,
/// flattened step-major: `[a_t, a_{t+1}, ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub horizon: usize,
    pub action_dim: usize,
    pub values: Vec<f64>,
    /// Seconds between consecutive steps.
    pub dt: f64,
}

impl ActionChunk {
    pub fn new(horizon: usize, action_dim: usize, values: Vec<f64>, dt: f64) -> Result<Self> {
        if values.len() != horizon * action_dim {
            return Err(Error::DimensionMismatch {
                what: "action chunk values",
                expected: horizon * action_dim,
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidBounds {
                dim: 0,
                lo: dt,
                hi: 0.0,
            });
        }
        Ok(Self {
            horizon,
            action_dim,
            values,
            dt,
        })
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.values[k * self.action_dim..(k + 1) * self.action_dim]
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.horizon, self.action_dim, values, self.dt)
    }

    /// Time-major matrix view (one row per step).
    pub fn as_matrix(&self) -> Matrix {
        Matrix::from_fn(self.horizon, self.action_dim, |i, j| {
            self.values[i * self.action_dim + j]
        })
    }
}

/// Which action dimensions participate in trajectory optimization. Excluded
/// dimensions (grasp toggles and the like) are never constrained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub action_dim: usize,
    pub selected: Vec<usize>,
}

impl SelectionSpec {
    pub fn new(action_dim: usize, selected: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; action_dim];
        for &idx in &selected {
            if idx >= action_dim {
                return Err(Error::BadSelectionIndex {
                    index: idx,
                    dim: action_dim,
                });
            }
            if seen[idx] {
                return Err(Error::DuplicateSelectionIndex { index: idx });
            }
            seen[idx] = true;
        }
        Ok(Self {
            action_dim,
            selected,
        })
    }

    /// All dimensions selected.
    pub fn full(action_dim: usize) -> Self {
        Self {
            action_dim,
            selected: (0..action_dim).collect(),
        }
    }

    pub fn selected_dim(&self) -> usize {
        self.selected.len()
    }

    /// Extracts the selected coordinates of one action.
    pub fn pick(&self, action: &[f64]) -> Vec<f64> {
        self.selected.iter().map(|&i| action[i]).collect()
    }
}

/// Hard bounds on the per-step derivative of the selected dimensions, plus
/// optional direct value bounds and the previously executed action used by
/// the inference-time linking constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    /// Lower derivative bounds, selected-action units per second.
    pub rate_min: Vec<f64>,
    pub rate_max: Vec<f64>,
    pub value_min: Option<Vec<f64>>,
    pub value_max: Option<Vec<f64>>,
    pub prev_action: Option<Vec<f64>>,
}

impl ConstraintSpec {
    pub fn new(rate_min: Vec<f64>, rate_max: Vec<f64>) -> Result<Self> {
        if rate_min.len() != rate_max.len() {
            return Err(Error::DimensionMismatch {
                what: "rate bounds",
                expected: rate_min.len(),
                got: rate_max.len(),
            });
        }
        for (dim, (lo, hi)) in rate_min.iter().zip(&rate_max).enumerate() {
            if !(lo < hi) {
                return Err(Error::InvalidBounds {
                    dim,
                    lo: *lo,
                    hi: *hi,
                });
            }
        }
        Ok(Self {
            rate_min,
            rate_max,
            value_min: None,
            value_max: None,
            prev_action: None,
        })
    }

    /// Symmetric bounds `d_max = -d_min = rate` on every selected dimension.
    pub fn symmetric(rate: f64, selected_dim: usize) -> Result<Self> {
        Self::new(vec![-rate; selected_dim], vec![rate; selected_dim])
    }

    pub fn with_value_bounds(mut self, value_min: Vec<f64>, value_max: Vec<f64>) -> Result<Self> {
        for (dim, (lo, hi)) in value_min.iter().zip(&value_max).enumerate() {
            if !(lo < hi) {
                return Err(Error::InvalidBounds {
                    dim,
                    lo: *lo,
                    hi: *hi,
                });
            }
        }
        self.value_min = Some(value_min);
        self.value_max = Some(value_max);
        Ok(self)
    }

    pub fn with_prev_action(mut self, prev: Vec<f64>) -> Self {
        self.prev_action = Some(prev);
        self
    }

    pub fn selected_dim(&self) -> usize {
        self.rate_min.len()
    }
}

/// Weight on the squared-derivative smoothing term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpec {
    pub weight: f64,
}

impl SmoothingSpec {
    pub fn new(weight: f64) -> Result<Self> {
        if !(weight >= 0.0) {
            return Err(Error::InvalidBounds {
                dim: 0,
                lo: weight,
                hi: f64::INFINITY,
            });
        }
        Ok(Self { weight })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssembleMode {
    Train,
    /// Adds the linking rows tying the first step to the previously
    /// executed action.
    Inference,
}

/// Block-diagonal selection matrix extracting the selected dimensions at
/// every step: `(horizon * D_c) x (horizon * D_a)`, one 1 per row.
pub fn build_selection(spec: &SelectionSpec, horizon: usize) -> Result<Matrix> {
    if spec.selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    let dc = spec.selected_dim();
    let da = spec.action_dim;
    let mut s = Matrix::zeros(horizon * dc, horizon * da);
    for step in 0..horizon {
        for (row, &col) in spec.selected.iter().enumerate() {
            s.set(step * dc + row, step * da + col, 1.0);
        }
    }
    Ok(s)
}

/// Banded forward-difference operator: maps a stacked selected trajectory to
/// its per-step derivative, `((horizon-1) * D_c) x (horizon * D_c)` with one
/// `-1/dt` and one `+1/dt` per row.
pub fn build_difference(horizon: usize, selected_dim: usize, dt: f64) -> Result<Matrix> {
    if horizon < 2 {
        return Err(Error::ChunkTooShort {
            len: horizon,
            need: 2,
        });
    }
    let inv_dt = 1.0 / dt;
    let mut d = Matrix::zeros((horizon - 1) * selected_dim, horizon * selected_dim);
    for step in 0..horizon - 1 {
        for j in 0..selected_dim {
            let row = step * selected_dim + j;
            d.set(row, step * selected_dim + j, -inv_dt);
            d.set(row, (step + 1) * selected_dim + j, inv_dt);
        }
    }
    Ok(d)
}

/// Plain +-1 difference rows (no 1/dt); constraint rows use these with
/// right-hand sides scaled by dt so the bounds stay exact.
fn build_plain_difference(horizon: usize, selected_dim: usize) -> Matrix {
    let mut d = Matrix::zeros((horizon - 1) * selected_dim, horizon * selected_dim);
    for step in 0..horizon - 1 {
        for j in 0..selected_dim {
            let row = step * selected_dim + j;
            d.set(row, step * selected_dim + j, -1.0);
            d.set(row, (step + 1) * selected_dim + j, 1.0);
        }
    }
    d
}

fn tile(bounds: &[f64], reps: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(bounds.len() * reps);
    for _ in 0..reps {
        out.extend_from_slice(bounds);
    }
    out
}

fn validate_assembly(
    chunk: &ActionChunk,
    sel: &SelectionSpec,
    cons: &ConstraintSpec,
    mode: AssembleMode,
) -> Result<()> {
    if sel.action_dim != chunk.action_dim {
        return Err(Error::DimensionMismatch {
            what: "selection action dimension",
            expected: chunk.action_dim,
            got: sel.action_dim,
        });
    }
    if cons.selected_dim() != sel.selected_dim() {
        return Err(Error::DimensionMismatch {
            what: "constraint dimension",
            expected: sel.selected_dim(),
            got: cons.selected_dim(),
        });
    }
    if mode == AssembleMode::Inference && cons.prev_action.is_none() {
        return Err(Error::MissingPrevAction);
    }
    if let Some(prev) = &cons.prev_action {
        if prev.len() != sel.selected_dim() {
            return Err(Error::DimensionMismatch {
                what: "previous action",
                expected: sel.selected_dim(),
                got: prev.len(),
            });
        }
    }
    Ok(())
}

/// Constraint stack on a stacked selected trajectory `c` of `horizon` steps:
/// difference rows, optional linking rows, optional value rows.
fn constraint_stack(
    horizon: usize,
    cons: &ConstraintSpec,
    mode: AssembleMode,
    dt: f64,
) -> (Matrix, Vec<f64>) {
    let dc = cons.selected_dim();
    let diff = build_plain_difference(horizon, dc);
    let neg_diff = diff.scale(-1.0);
    let mut blocks = vec![diff.clone(), neg_diff];
    let scaled_max: Vec<f64> = cons.rate_max.iter().map(|d| d * dt).collect();
    let scaled_min: Vec<f64> = cons.rate_min.iter().map(|d| d * dt).collect();
    let mut rhs = tile(&scaled_max, horizon - 1);
    rhs.extend(scaled_min.iter().map(|d| -d).repeat_tile(horizon - 1));

    if mode == AssembleMode::Inference {
        let prev = cons.prev_action.as_ref().expect("validated");
        let mut first = Matrix::zeros(dc, horizon * dc);
        for j in 0..dc {
            first.set(j, j, 1.0);
        }
        blocks.push(first.clone());
        blocks.push(first.scale(-1.0));
        for j in 0..dc {
            rhs.push(prev[j] + scaled_max[j]);
        }
        for j in 0..dc {
            rhs.push(-(prev[j] + scaled_min[j]));
        }
    }

    if let (Some(vmin), Some(vmax)) = (&cons.value_min, &cons.value_max) {
        let eye = Matrix::identity(horizon * dc);
        blocks.push(eye.clone());
        blocks.push(eye.scale(-1.0));
        rhs.extend(tile(vmax, horizon));
        rhs.extend(vmin.iter().map(|v| -v).repeat_tile(horizon));
    }

    let refs: Vec<&Matrix> = blocks.iter().collect();
    (Matrix::vstack(&refs).expect("uniform widths"), rhs)
}

trait RepeatTile: Iterator + Sized
where
    Self::Item: Clone,
{
    fn repeat_tile(self, reps: usize) -> std::vec::IntoIter<Self::Item> {
        let base: Vec<Self::Item> = self.collect();
        let mut out = Vec::with_capacity(base.len() * reps);
        for _ in 0..reps {
            out.extend(base.iter().cloned());
        }
        out.into_iter()
    }
}

impl<I: Iterator> RepeatTile for I where I::Item: Clone {}

/// Assembles the full-space refinement QP over all `horizon * action_dim`
/// decision variables.
pub fn assemble(
    chunk: &ActionChunk,
    cost: &Matrix,
    smoothing: SmoothingSpec,
    sel: &SelectionSpec,
    cons: &ConstraintSpec,
    mode: AssembleMode,
) -> Result<QpInstance> {
    validate_assembly(chunk, sel, cons, mode)?;
    let n = chunk.horizon * chunk.action_dim;
    if cost.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            what: "cost matrix dimension",
            expected: n,
            got: cost.rows(),
        });
    }
    let selection = build_selection(sel, chunk.horizon)?;

    let mut quad = cost.clone();
    if smoothing.weight > 0.0 {
        let diff = build_difference(chunk.horizon, sel.selected_dim(), chunk.dt)?;
        let diff_sel = diff.matmul(&selection)?;
        let penalty = diff_sel.transpose().matmul(&diff_sel)?;
        quad = quad.add(&penalty.scale(smoothing.weight))?;
    }

    let lin: Vec<f64> = chunk.values.iter().map(|a| -a).collect();
    let (stack_c, rhs) = constraint_stack(chunk.horizon, cons, mode, chunk.dt);
    let ineq = stack_c.matmul(&selection)?;
    QpInstance::new(quad, lin, ineq, rhs)
}

/// Assembles the reduced QP over the selected coordinates only; the excluded
/// coordinates are held at the input chunk's values and passed through. The
/// cost matrix is restricted to the selected block, with the cross term
/// against the frozen coordinates folded into the linear term.
pub fn assemble_selected(
    chunk: &ActionChunk,
    cost: &Matrix,
    smoothing: SmoothingSpec,
    sel: &SelectionSpec,
    cons: &ConstraintSpec,
    mode: AssembleMode,
) -> Result<QpInstance> {
    validate_assembly(chunk, sel, cons, mode)?;
    let n_full = chunk.horizon * chunk.action_dim;
    if cost.shape() != (n_full, n_full) {
        return Err(Error::DimensionMismatch {
            what: "cost matrix dimension",
            expected: n_full,
            got: cost.rows(),
        });
    }
    let selection = build_selection(sel, chunk.horizon)?;
    let q_sel = selection
        .matmul(cost)?
        .matmul(&selection.transpose())?;

    let mut quad = q_sel;
    if smoothing.weight > 0.0 {
        let diff = build_difference(chunk.horizon, sel.selected_dim(), chunk.dt)?;
        let penalty = diff.transpose().matmul(&diff)?;
        quad = quad.add(&penalty.scale(smoothing.weight))?;
    }

    // Frozen part of the chunk: zero on selected coordinates.
    let picked = selection.matvec(&chunk.values)?;
    let lifted = selection.matvec_t(&picked)?;
    let frozen: Vec<f64> = chunk
        .values
        .iter()
        .zip(&lifted)
        .map(|(a, l)| a - l)
        .collect();
    let cross = selection.matvec(&cost.matvec(&frozen)?)?;
    let lin: Vec<f64> = picked
        .iter()
        .zip(&cross)
        .map(|(a, c)| c - a)
        .collect();

    let (ineq, rhs) = constraint_stack(chunk.horizon, cons, mode, chunk.dt);
    QpInstance::new(quad, lin, ineq, rhs)
}

/// Scatters a reduced solution back over the input chunk.
pub fn splice_selected(chunk: &ActionChunk, sel: &SelectionSpec, reduced: &[f64]) -> Vec<f64> {
    let dc = sel.selected_dim();
    let mut out = chunk.values.clone();
    for step in 0..chunk.horizon {
        for (j, &dim) in sel.selected.iter().enumerate() {
            out[step * chunk.action_dim + dim] = reduced[step * dc + j];
        }
    }
    out
}

/// Squared derivative magnitude `|A_diff S y|^2` of a flattened trajectory.
pub fn smoothness_cost(values: &[f64], sel: &SelectionSpec, dt: f64) -> Result<f64> {
    let da = sel.action_dim;
    debug_assert_eq!(values.len() % da, 0);
    let horizon = values.len() / da;
    if horizon < 2 {
        return Err(Error::ChunkTooShort {
            len: horizon,
            need: 2,
        });
    }
    let mut total = 0.0;
    for step in 0..horizon - 1 {
        for &dim in &sel.selected {
            let a = values[step * da + dim];
            let b = values[(step + 1) * da + dim];
            let d = (b - a) / dt;
            total += d * d;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::{solve_qp, DEFAULT_MAX_ITER, DEFAULT_TOL};

    #[test]
    fn selection_single_dim_is_identity() {
        let sel = SelectionSpec::new(1, vec![0]).unwrap();
        let s = build_selection(&sel, 2).unwrap();
        assert_eq!(s, Matrix::identity(2));
    }

    #[test]
    fn selection_picks_first_of_two() {
        let sel = SelectionSpec::new(2, vec![0]).unwrap();
        let s = build_selection(&sel, 1).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn selection_structure_brute_check() {
        let sel = SelectionSpec::new(7, (0..6).collect()).unwrap();
        let s = build_selection(&sel, 3).unwrap();
        assert_eq!(s.shape(), (18, 21));
        for i in 0..18 {
            let ones = s.row_slice(i).iter().filter(|v| **v == 1.0).count();
            let zeros = s.row_slice(i).iter().filter(|v| **v == 0.0).count();
            assert_eq!(ones, 1);
            assert_eq!(zeros, 20);
        }
        // S a extracts the selected dimensions at every step in order.
        let a: Vec<f64> = (0..21).map(|i| i as f64).collect();
        let picked = s.matvec(&a).unwrap();
        let expect: Vec<f64> = (0..3)
            .flat_map(|step| (0..6).map(move |d| (step * 7 + d) as f64))
            .collect();
        assert_eq!(picked, expect);
    }

    #[test]
    fn empty_selection_rejected() {
        let sel = SelectionSpec::new(3, vec![]).unwrap();
        assert!(matches!(
            build_selection(&sel, 2),
            Err(Error::EmptySelection)
        ));
    }

    #[test]
    fn difference_banded_form() {
        let d = build_difference(3, 1, 1.0).unwrap();
        assert_eq!(d.shape(), (2, 3));
        assert_eq!(d.row_slice(0), &[-1.0, 1.0, 0.0]);
        assert_eq!(d.row_slice(1), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn difference_of_constant_is_zero() {
        let d = build_difference(3, 1, 1.0).unwrap();
        assert_eq!(d.matvec(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn difference_arithmetic() {
        let d = build_difference(3, 1, 1.0).unwrap();
        let got = d.matvec(&[0.0, 0.1, 0.3]).unwrap();
        assert!((got[0] - 0.1).abs() < 1e-15);
        assert!((got[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn difference_requires_two_steps() {
        assert!(matches!(
            build_difference(1, 1, 1.0),
            Err(Error::ChunkTooShort { .. })
        ));
    }

    fn tiny_chunk(values: Vec<f64>) -> ActionChunk {
        ActionChunk::new(2, 1, values, 1.0).unwrap()
    }

    #[test]
    fn assemble_direct_construction() {
        let chunk = tiny_chunk(vec![0.0, 0.3]);
        let sel = SelectionSpec::full(1);
        let cons = ConstraintSpec::symmetric(0.1, 1).unwrap();
        let inst = assemble(
            &chunk,
            &Matrix::identity(2),
            SmoothingSpec::new(0.0).unwrap(),
            &sel,
            &cons,
            AssembleMode::Train,
        )
        .unwrap();
        assert_eq!(inst.quad(), &Matrix::identity(2));
        assert_eq!(inst.lin(), &[0.0, -0.3]);
        assert_eq!(inst.ineq().row_slice(0), &[-1.0, 1.0]);
        assert_eq!(inst.ineq().row_slice(1), &[1.0, -1.0]);
        assert_eq!(inst.bound(), &[0.1, 0.1]);
    }

    #[test]
    fn assemble_smoothing_term() {
        let chunk = tiny_chunk(vec![0.0, 0.3]);
        let sel = SelectionSpec::full(1);
        let cons = ConstraintSpec::symmetric(0.1, 1).unwrap();
        let inst = assemble(
            &chunk,
            &Matrix::identity(2),
            SmoothingSpec::new(2.0).unwrap(),
            &sel,
            &cons,
            AssembleMode::Train,
        )
        .unwrap();
        // I + 2 * [[1,-1],[-1,1]] for two steps at dt = 1.
        let expect = Matrix::from_vec(2, 2, vec![3.0, -2.0, -2.0, 3.0]).unwrap();
        assert_eq!(inst.quad(), &expect);
    }

    #[test]
    fn assemble_inference_adds_linking_rows() {
        let chunk = tiny_chunk(vec![0.0, 0.05]);
        let sel = SelectionSpec::full(1);
        let cons = ConstraintSpec::symmetric(0.1, 1)
            .unwrap()
            .with_prev_action(vec![0.0]);
        let inst = assemble(
            &chunk,
            &Matrix::identity(2),
            SmoothingSpec::new(0.0).unwrap(),
            &sel,
            &cons,
            AssembleMode::Inference,
        )
        .unwrap();
        assert_eq!(inst.num_constraints(), 4);
        assert_eq!(inst.ineq().row_slice(2), &[1.0, 0.0]);
        assert_eq!(inst.ineq().row_slice(3), &[-1.0, 0.0]);
        assert_eq!(inst.bound()[2], 0.1);
        assert_eq!(inst.bound()[3], 0.1);
    }

    #[test]
    fn inference_without_prev_rejected() {
        let chunk = tiny_chunk(vec![0.0, 0.05]);
        let sel = SelectionSpec::full(1);
        let cons = ConstraintSpec::symmetric(0.1, 1).unwrap();
        assert!(matches!(
            assemble(
                &chunk,
                &Matrix::identity(2),
                SmoothingSpec::new(0.0).unwrap(),
                &sel,
                &cons,
                AssembleMode::Inference,
            ),
            Err(Error::MissingPrevAction)
        ));
    }

    #[test]
    fn wrong_cost_dimension_rejected() {
        let chunk = tiny_chunk(vec![0.0, 0.05]);
        let sel = SelectionSpec::full(1);
        let cons = ConstraintSpec::symmetric(0.1, 1).unwrap();
        assert!(matches!(
            assemble(
                &chunk,
                &Matrix::identity(3),
                SmoothingSpec::new(0.0).unwrap(),
                &sel,
                &cons,
                AssembleMode::Train,
            ),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn value_bounds_add_identity_rows_and_bind() {
        // Direct value bounds on the selected entries stack under the
        // difference rows; the solution respects both constraint families.
        let chunk = ActionChunk::new(3, 1, vec![0.0, 0.4, 0.9], 1.0).unwrap();
        let sel = SelectionSpec::full(1);
        let cons = ConstraintSpec::symmetric(0.3, 1)
            .unwrap()
            .with_value_bounds(vec![-0.5], vec![0.5])
            .unwrap();
        let inst = assemble(
            &chunk,
            &Matrix::identity(3),
            SmoothingSpec::new(0.0).unwrap(),
            &sel,
            &cons,
            AssembleMode::Train,
        )
        .unwrap();
        // 2*(T_p-1) difference rows + 2*T_p value rows.
        assert_eq!(inst.num_constraints(), 4 + 6);
        let sol = solve_qp(&inst, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        for step in 0..3 {
            assert!(sol.primal[step].abs() <= 0.5 + 1e-6, "value bound violated");
        }
        for step in 0..2 {
            let d = sol.primal[step + 1] - sol.primal[step];
            assert!(d.abs() <= 0.3 + 1e-6, "rate bound violated");
        }
        // The input's last value 0.9 must have been pulled inside the box.
        assert!(sol.primal[2] <= 0.5 + 1e-6);
    }

    #[test]
    fn value_bound_ordering_validated() {
        assert!(matches!(
            ConstraintSpec::symmetric(0.1, 1)
                .unwrap()
                .with_value_bounds(vec![0.5], vec![0.5]),
            Err(Error::InvalidBounds { .. })
        ));
    }

    #[test]
    fn smoothness_cost_cases() {
        let sel = SelectionSpec::full(1);
        assert_eq!(smoothness_cost(&[2.0, 2.0, 2.0], &sel, 1.0).unwrap(), 0.0);
        assert_eq!(smoothness_cost(&[0.0, 1.0], &sel, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn smoothness_cost_matches_loop_oracle() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let sel = SelectionSpec::new(3, vec![0, 2]).unwrap();
        let values: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dt = 0.25;
        let mut oracle = 0.0;
        for step in 0..4 {
            for &d in &[0usize, 2] {
                let diff = (values[(step + 1) * 3 + d] - values[step * 3 + d]) / dt;
                oracle += diff * diff;
            }
        }
        let got = smoothness_cost(&values, &sel, dt).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_identity_map() {
        // alpha = 0, Q = I, loose bounds: the optimizer returns the input.
        let chunk = ActionChunk::new(3, 2, vec![0.1, -0.2, 0.15, -0.1, 0.2, 0.0], 1.0).unwrap();
        let sel = SelectionSpec::full(2);
        let cons = ConstraintSpec::symmetric(10.0, 2).unwrap();
        let inst = assemble(
            &chunk,
            &Matrix::identity(6),
            SmoothingSpec::new(0.0).unwrap(),
            &sel,
            &cons,
            AssembleMode::Train,
        )
        .unwrap();
        let sol = solve_qp(&inst, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        for (got, want) in sol.primal.iter().zip(&chunk.values) {
            assert!((got - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn grasp_dimension_passes_through_with_identity_cost() {
        // Dimension 1 is excluded; with Q = I it must come back unchanged.
        let chunk = ActionChunk::new(2, 2, vec![0.0, 0.9, 0.5, -0.7], 1.0).unwrap();
        let sel = SelectionSpec::new(2, vec![0]).unwrap();
        let cons = ConstraintSpec::symmetric(0.1, 1).unwrap();
        let inst = assemble(
            &chunk,
            &Matrix::identity(4),
            SmoothingSpec::new(0.0).unwrap(),
            &sel,
            &cons,
            AssembleMode::Train,
        )
        .unwrap();
        let sol = solve_qp(&inst, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((sol.primal[1] - 0.9).abs() <= 1e-8);
        assert!((sol.primal[3] + 0.7).abs() <= 1e-8);
        // Selected dimension obeys the bound.
        assert!((sol.primal[2] - sol.primal[0]).abs() <= 0.1 + 1e-6);
    }

    #[test]
    fn reduced_assembly_matches_full_for_identity_cost() {
        let chunk = ActionChunk::new(3, 2, vec![0.0, 0.9, 0.4, -0.7, 0.5, 0.3], 0.5).unwrap();
        let sel = SelectionSpec::new(2, vec![0]).unwrap();
        let cons = ConstraintSpec::symmetric(0.2, 1).unwrap();
        let smoothing = SmoothingSpec::new(1.5).unwrap();
        let eye = Matrix::identity(6);
        let full = assemble(&chunk, &eye, smoothing, &sel, &cons, AssembleMode::Train).unwrap();
        let reduced =
            assemble_selected(&chunk, &eye, smoothing, &sel, &cons, AssembleMode::Train).unwrap();
        let full_sol = solve_qp(&full, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let red_sol = solve_qp(&reduced, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let spliced = splice_selected(&chunk, &sel, &red_sol.primal);
        for (a, b) in full_sol.primal.iter().zip(&spliced) {
            assert!((a - b).abs() <= 1e-7, "{a} vs {b}");
        }
    }
}
