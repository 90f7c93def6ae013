//! Strictly convex quadratic programs with inequality constraints and an
//! analytic backward pass through the KKT optimality conditions.
//!
//! Problems have the form
//!
//! ```text
//!     minimize    1/2 y' P y + q' y
//!     subject to  G y <= h
//! ```
//!
//! with `P` symmetric positive definite. The forward solver is a primal-dual
//! interior-point method with Mehrotra predictor-corrector steps; the
//! backward pass solves the transposed linearized KKT system, so gradients
//! with respect to `P` and `q` come out of one dense linear solve instead of
//! unrolling solver iterations.

use crate::error::{Error, Result};
use crate::tensor::{cholesky_solve, cholesky_spd, dot, inf_norm, lu_solve, Matrix};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 50;

/// Fraction-to-boundary factor keeping iterates strictly interior.
const STEP_FRACTION: f64 = 0.99;
/// Minimum initial slack after shifting the unconstrained start inside.
const INITIAL_SLACK: f64 = 1e-3;
/// Diagonal regularization applied when the linearized KKT system is
/// singular (degenerate active set).
const KKT_REGULARIZATION: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct QpInstance {
    quad: Matrix,
    lin: Vec<f64>,
    ineq: Matrix,
    bound: Vec<f64>,
}

impl QpInstance {
    /// Assembles an instance; `quad` is symmetrized so downstream math can
    /// rely on exact symmetry.
    pub fn new(quad: Matrix, lin: Vec<f64>, ineq: Matrix, bound: Vec<f64>) -> Result<Self> {
        let n = lin.len();
        if quad.shape() != (n, n) {
            return Err(Error::ShapeMismatch {
                op: "qp quadratic term",
                left: quad.shape(),
                right: (n, n),
            });
        }
        if ineq.rows() != bound.len() || (ineq.rows() > 0 && ineq.cols() != n) {
            return Err(Error::ShapeMismatch {
                op: "qp inequality system",
                left: ineq.shape(),
                right: (bound.len(), n),
            });
        }
        Ok(Self {
            quad: quad.symmetrize(),
            lin,
            ineq,
            bound,
        })
    }

    pub fn unconstrained(quad: Matrix, lin: Vec<f64>) -> Result<Self> {
        let n = lin.len();
        Self::new(quad, lin, Matrix::zeros(0, n), Vec::new())
    }

    pub fn num_vars(&self) -> usize {
        self.lin.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.bound.len()
    }

    pub fn quad(&self) -> &Matrix {
        &self.quad
    }

    pub fn lin(&self) -> &[f64] {
        &self.lin
    }

    pub fn ineq(&self) -> &Matrix {
        &self.ineq
    }

    pub fn bound(&self) -> &[f64] {
        &self.bound
    }

    pub fn objective(&self, y: &[f64]) -> f64 {
        let py = self.quad.matvec(y).expect("objective dims");
        0.5 * dot(y, &py) + dot(&self.lin, y)
    }

    /// `P y + q + G' lambda`, the stationarity residual.
    fn dual_residual(&self, y: &[f64], lambda: &[f64]) -> Vec<f64> {
        let mut r = self.quad.matvec(y).expect("dual residual dims");
        for (ri, qi) in r.iter_mut().zip(&self.lin) {
            *ri += qi;
        }
        if !lambda.is_empty() {
            let gt_lambda = self.ineq.matvec_t(lambda).expect("dual residual dims");
            for (ri, gi) in r.iter_mut().zip(&gt_lambda) {
                *ri += gi;
            }
        }
        r
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub primal: Vec<f64>,
    pub dual: Vec<f64>,
    pub slack: Vec<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
}

impl QpSolution {
    pub fn max_violation(&self) -> f64 {
        self.slack.iter().fold(0.0, |m, s| m.max(-s))
    }

    /// Fraction of constraints whose slack is below `tol`.
    pub fn active_fraction(&self, tol: f64) -> f64 {
        if self.slack.is_empty() {
            return 0.0;
        }
        let active = self.slack.iter().filter(|s| **s < tol).count();
        active as f64 / self.slack.len() as f64
    }
}

/// Solves the QP to `tol` on the infinity-norm KKT residual.
pub fn solve_qp(inst: &QpInstance, tol: f64, max_iter: usize) -> Result<QpSolution> {
    debug_assert!(tol > 0.0);
    let n = inst.num_vars();
    let m = inst.num_constraints();

    let quad_factor = cholesky_spd(&inst.quad)?;
    let neg_lin: Vec<f64> = inst.lin.iter().map(|v| -v).collect();
    let mut y = cholesky_solve(&quad_factor, &neg_lin)?;

    if m == 0 {
        let residual = inf_norm(&inst.dual_residual(&y, &[]));
        return Ok(QpSolution {
            primal: y,
            dual: Vec::new(),
            slack: Vec::new(),
            iterations: 0,
            kkt_residual: residual,
        });
    }

    // Shift the unconstrained start strictly inside the polytope.
    let gy = inst.ineq.matvec(&y)?;
    let mut slack: Vec<f64> = inst
        .bound
        .iter()
        .zip(&gy)
        .map(|(h, g)| (h - g).max(INITIAL_SLACK))
        .collect();
    let mut lambda = vec![1.0; m];

    let mut kkt = f64::INFINITY;
    for iter in 0..max_iter {
        let r_dual = inst.dual_residual(&y, &lambda);
        let gy = inst.ineq.matvec(&y)?;
        let r_prim: Vec<f64> = gy
            .iter()
            .zip(&slack)
            .zip(&inst.bound)
            .map(|((g, s), h)| g + s - h)
            .collect();
        let comp_max = lambda
            .iter()
            .zip(&slack)
            .fold(0.0f64, |acc, (l, s)| acc.max((l * s).abs()));
        kkt = inf_norm(&r_dual).max(inf_norm(&r_prim)).max(comp_max);
        if kkt <= tol {
            return Ok(QpSolution {
                primal: y,
                dual: lambda,
                slack,
                iterations: iter,
                kkt_residual: kkt,
            });
        }

        let mu = dot(&lambda, &slack) / m as f64;
        let weights: Vec<f64> = lambda.iter().zip(&slack).map(|(l, s)| l / s).collect();

        // Normal-equations matrix P + G' W G, shared by both steps.
        let mut reduced = inst.quad.clone();
        for row in 0..m {
            let w = weights[row];
            let g_row = inst.ineq.row_slice(row);
            for i in 0..n {
                let gi = g_row[i] * w;
                if gi == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let v = reduced.get(i, j) + gi * g_row[j];
                    reduced.set(i, j, v);
                }
            }
        }
        let reduced_factor = cholesky_spd(&reduced)?;

        let solve_step = |comp: &[f64]| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            // comp holds the complementarity residual r_c with
            // ds = -r_c/lambda - (s/lambda) dl and
            // dl = W (G dy + r_p) - r_c / s.
            let mut rhs = vec![0.0; n];
            let mut stacked = vec![0.0; m];
            for i in 0..m {
                stacked[i] = weights[i] * r_prim[i] - comp[i] / slack[i];
            }
            let gt = inst.ineq.matvec_t(&stacked)?;
            for i in 0..n {
                rhs[i] = -(r_dual[i] + gt[i]);
            }
            let dy = cholesky_solve(&reduced_factor, &rhs)?;
            let g_dy = inst.ineq.matvec(&dy)?;
            let mut dl = vec![0.0; m];
            let mut ds = vec![0.0; m];
            for i in 0..m {
                dl[i] = weights[i] * (g_dy[i] + r_prim[i]) - comp[i] / slack[i];
                ds[i] = -comp[i] / lambda[i] - slack[i] / lambda[i] * dl[i];
            }
            Ok((dy, dl, ds))
        };

        // Affine scaling (predictor) step with separate primal and dual
        // step lengths.
        let comp_aff: Vec<f64> = lambda.iter().zip(&slack).map(|(l, s)| l * s).collect();
        let (_dy_aff, dl_aff, ds_aff) = solve_step(&comp_aff)?;
        let alpha_aff_p = max_step(&slack, &ds_aff);
        let alpha_aff_d = max_step(&lambda, &dl_aff);
        let mu_aff = {
            let mut acc = 0.0;
            for i in 0..m {
                acc +=
                    (lambda[i] + alpha_aff_d * dl_aff[i]) * (slack[i] + alpha_aff_p * ds_aff[i]);
            }
            acc / m as f64
        };
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        // Corrector step with centering.
        let comp_corr: Vec<f64> = (0..m)
            .map(|i| lambda[i] * slack[i] - sigma * mu + dl_aff[i] * ds_aff[i])
            .collect();
        let (dy, dl, ds) = solve_step(&comp_corr)?;
        let alpha_p = (STEP_FRACTION * max_step(&slack, &ds)).min(1.0);
        let alpha_d = (STEP_FRACTION * max_step(&lambda, &dl)).min(1.0);

        for i in 0..n {
            y[i] += alpha_p * dy[i];
        }
        for i in 0..m {
            lambda[i] += alpha_d * dl[i];
            slack[i] += alpha_p * ds[i];
        }
    }

    Err(Error::QpNonConvergence {
        max_iter,
        residual: kkt,
        tol,
    })
}

/// Largest step in [0, 1] keeping `x + alpha d` nonnegative.
fn max_step(x: &[f64], d: &[f64]) -> f64 {
    let mut alpha = 1.0f64;
    for (xi, di) in x.iter().zip(d) {
        if *di < 0.0 {
            alpha = alpha.min(-xi / di);
        }
    }
    alpha
}

#[derive(Debug, Clone)]
pub struct QpBackward {
    /// Gradient of the loss with respect to the quadratic term.
    pub grad_quad: Matrix,
    /// Gradient of the loss with respect to the linear term.
    pub grad_lin: Vec<f64>,
    /// True when the linearized KKT system needed diagonal regularization.
    pub regularized: bool,
}

/// Differentiates a loss through the argmin, holding `G` and `h` fixed.
///
/// Solves the transposed linearized KKT system
///
/// ```text
///     [ P  G' diag(lambda) ] [d_y]     [-dL/dy]
///     [ G  diag(G y - h)   ] [d_l]  =  [  0   ]
/// ```
///
/// and reads off `grad_q = d_y`, `grad_P = (d_y y' + y d_y') / 2`.
pub fn qp_backward(inst: &QpInstance, sol: &QpSolution, loss_grad: &[f64]) -> Result<QpBackward> {
    let n = inst.num_vars();
    let m = inst.num_constraints();
    debug_assert_eq!(loss_grad.len(), n);

    let d_y = if m == 0 {
        let factor = cholesky_spd(&inst.quad)?;
        let neg: Vec<f64> = loss_grad.iter().map(|g| -g).collect();
        cholesky_solve(&factor, &neg)?
    } else {
        let dim = n + m;
        let mut kkt = Matrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                kkt.set(i, j, inst.quad.get(i, j));
            }
            for j in 0..m {
                kkt.set(i, n + j, inst.ineq.get(j, i) * sol.dual[j]);
            }
        }
        for i in 0..m {
            for j in 0..n {
                kkt.set(n + i, j, inst.ineq.get(i, j));
            }
            // G y - h = -slack at the solution.
            kkt.set(n + i, n + i, -sol.slack[i]);
        }
        let mut rhs = vec![0.0; dim];
        for i in 0..n {
            rhs[i] = -loss_grad[i];
        }
        match lu_solve(&kkt, &rhs) {
            Ok(adjoint) => adjoint[..n].to_vec(),
            Err(Error::SingularSystem { .. }) => {
                for i in 0..dim {
                    kkt.set(i, i, kkt.get(i, i) + KKT_REGULARIZATION);
                }
                let adjoint = lu_solve(&kkt, &rhs)?;
                return Ok(finish_backward(&adjoint[..n], &sol.primal, true));
            }
            Err(e) => return Err(e),
        }
    };

    Ok(finish_backward(&d_y, &sol.primal, false))
}

fn finish_backward(d_y: &[f64], primal: &[f64], regularized: bool) -> QpBackward {
    let n = primal.len();
    let grad_quad = Matrix::from_fn(n, n, |i, j| 0.5 * (d_y[i] * primal[j] + primal[i] * d_y[j]));
    QpBackward {
        grad_quad,
        grad_lin: d_y.to_vec(),
        regularized,
    }
}

/// Solves a homogeneous batch; every instance must share `n` and `m`.
/// Results are elementwise identical to per-instance `solve_qp` calls.
pub fn solve_batch(
    instances: &[QpInstance],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<QpSolution>> {
    if let Some(first) = instances.first() {
        let (n, m) = (first.num_vars(), first.num_constraints());
        for (index, inst) in instances.iter().enumerate() {
            if inst.num_vars() != n || inst.num_constraints() != m {
                return Err(Error::QpBatch {
                    index,
                    source: Box::new(Error::ShapeMismatch {
                        op: "batch instance",
                        left: (inst.num_constraints(), inst.num_vars()),
                        right: (m, n),
                    }),
                });
            }
        }
    }
    instances
        .iter()
        .enumerate()
        .map(|(index, inst)| {
            solve_qp(inst, tol, max_iter).map_err(|e| Error::QpBatch {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}
