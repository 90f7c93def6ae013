//! Trajectory-quality metrics: repeated finite differences of executed
//! actions, per-dimension maxima and standard deviations, and violation
//! statistics against a hard bound.
//!
//! "Max" is the per-dimension maximum absolute value averaged across
//! dimensions; "std" is the per-dimension population standard deviation over
//! time, averaged across dimensions. The population convention (no Bessel
//! correction) is deliberate and fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Scalar converting a normalized linear-acceleration metric of the 6-DOF
/// velocity action space back to physical units (m/s^2). Documented for
/// reference; no such data is ingested here.
pub const VELOCITY_SPACE_LINEAR_ACC_SCALE: f64 = 20.0;
/// Same conversion for the axis-angle second derivative (rad/s^2).
pub const VELOCITY_SPACE_AXIS_ANGLE_ACC_SCALE: f64 = 200.0;

/// Violation test: entries with `|value| > bound + tol` count as violations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub bound: f64,
    pub tol: f64,
}

impl BoundCheck {
    pub fn new(bound: f64, tol: f64) -> Self {
        Self { bound, tol }
    }

    pub fn exact(bound: f64) -> Self {
        Self { bound, tol: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// 1 = velocity-like, 2 = acceleration-like.
    pub order: usize,
    pub per_dim_max: Vec<f64>,
    pub per_dim_std: Vec<f64>,
    pub avg_max: f64,
    pub avg_std: f64,
    pub violation_count: usize,
    pub max_violation: f64,
}

/// Repeated forward differences of a time-major series, divided by `dt` at
/// each order.
pub fn derivative_series(actions: &Matrix, dt: f64, order: usize) -> Result<Matrix> {
    if actions.rows() <= order {
        return Err(Error::SeriesTooShort {
            len: actions.rows(),
            order,
        });
    }
    let mut current = actions.clone();
    for _ in 0..order {
        let (rows, cols) = current.shape();
        let next = Matrix::from_fn(rows - 1, cols, |i, j| {
            (current.get(i + 1, j) - current.get(i, j)) / dt
        });
        current = next;
    }
    Ok(current)
}

/// Summarizes a derivative series; `order` is carried through for reporting.
pub fn summarize(series: &Matrix, order: usize, bound: Option<BoundCheck>) -> MetricReport {
    let (rows, cols) = series.shape();
    debug_assert!(rows > 0 && cols > 0);
    let mut per_dim_max = vec![0.0f64; cols];
    let mut per_dim_std = vec![0.0f64; cols];
    let mut violation_count = 0;
    let mut max_violation = 0.0f64;

    for j in 0..cols {
        let mut mean = 0.0;
        for i in 0..rows {
            let v = series.get(i, j);
            per_dim_max[j] = per_dim_max[j].max(v.abs());
            mean += v;
            if let Some(check) = bound {
                let excess = v.abs() - check.bound;
                if excess > check.tol {
                    violation_count += 1;
                }
                max_violation = max_violation.max(excess.max(0.0));
            }
        }
        mean /= rows as f64;
        let var = (0..rows)
            .map(|i| {
                let d = series.get(i, j) - mean;
                d * d
            })
            .sum::<f64>()
            / rows as f64;
        per_dim_std[j] = var.sqrt();
    }

    let avg_max = per_dim_max.iter().sum::<f64>() / cols as f64;
    let avg_std = per_dim_std.iter().sum::<f64>() / cols as f64;
    MetricReport {
        order,
        per_dim_max,
        per_dim_std,
        avg_max,
        avg_std,
        violation_count,
        max_violation,
    }
}

/// Per-episode reports averaged into one; matches summarize-then-average
/// rollout aggregation.
pub fn average_reports(reports: &[MetricReport]) -> Option<MetricReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let dims = first.per_dim_max.len();
    let mut out = MetricReport {
        order: first.order,
        per_dim_max: vec![0.0; dims],
        per_dim_std: vec![0.0; dims],
        avg_max: 0.0,
        avg_std: 0.0,
        violation_count: 0,
        max_violation: 0.0,
    };
    for r in reports {
        for j in 0..dims {
            out.per_dim_max[j] += r.per_dim_max[j] / n;
            out.per_dim_std[j] += r.per_dim_std[j] / n;
        }
        out.avg_max += r.avg_max / n;
        out.avg_std += r.avg_std / n;
        out.violation_count += r.violation_count;
        out.max_violation = out.max_violation.max(r.max_violation);
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_difference() {
        let series = Matrix::from_vec(3, 1, vec![0.0, 0.1, 0.3]).unwrap();
        let d = derivative_series(&series, 1.0, 1).unwrap();
        assert!((d.get(0, 0) - 0.1).abs() < 1e-15);
        assert!((d.get(1, 0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn second_difference_of_ramp_is_zero() {
        let series = Matrix::from_fn(6, 2, |i, j| 0.5 + i as f64 * (0.1 + j as f64 * 0.05));
        let d = derivative_series(&series, 0.25, 2).unwrap();
        assert!(d.max_abs() <= 1e-12);
    }

    #[test]
    fn derivative_matches_loop_oracle() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let series = Matrix::from_fn(9, 3, |_, _| rng.gen_range(-1.0..1.0));
        let dt = 0.1;
        let got = derivative_series(&series, dt, 2).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let oracle = (series.get(i + 2, j) - 2.0 * series.get(i + 1, j)
                    + series.get(i, j))
                    / (dt * dt);
                assert!((got.get(i, j) - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_short_series_rejected() {
        let series = Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            derivative_series(&series, 1.0, 2),
            Err(Error::SeriesTooShort { len: 2, order: 2 })
        ));
    }

    #[test]
    fn summarize_two_point_series() {
        let series = Matrix::from_vec(2, 1, vec![0.1, 0.2]).unwrap();
        let report = summarize(&series, 1, None);
        assert!((report.avg_max - 0.2).abs() < 1e-15);
        assert!((report.avg_std - 0.05).abs() < 1e-15);
    }

    #[test]
    fn summarize_averages_dimension_maxima() {
        let series = Matrix::from_vec(2, 2, vec![0.2, -0.4, 0.1, 0.3]).unwrap();
        let report = summarize(&series, 1, None);
        assert!((report.avg_max - 0.3).abs() < 1e-15);
        assert_eq!(report.per_dim_max, vec![0.2, 0.4]);
    }

    #[test]
    fn violation_stats() {
        let series = Matrix::from_vec(3, 1, vec![0.05, 0.11, -0.2]).unwrap();
        let report = summarize(&series, 1, Some(BoundCheck::exact(0.1)));
        assert_eq!(report.violation_count, 2);
        assert!((report.max_violation - 0.1).abs() < 1e-15);
        let clean = summarize(&series, 1, Some(BoundCheck::new(0.2, 1e-6)));
        assert_eq!(clean.violation_count, 0);
    }

    #[test]
    fn scaling_scales_max_and_std_exactly() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let series = Matrix::from_fn(8, 2, |_, _| rng.gen_range(-1.0..1.0));
        let s = 3.0;
        let base = summarize(&series, 1, None);
        let scaled = summarize(&series.scale(s), 1, None);
        assert!((scaled.avg_max - s * base.avg_max).abs() < 1e-12);
        assert!((scaled.avg_std - s * base.avg_std).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariance_over_dimensions() {
        let series = Matrix::from_vec(2, 3, vec![0.1, 0.5, -0.3, 0.2, -0.6, 0.4]).unwrap();
        let permuted = Matrix::from_vec(2, 3, vec![-0.3, 0.1, 0.5, 0.4, 0.2, -0.6]).unwrap();
        let a = summarize(&series, 1, None);
        let b = summarize(&permuted, 1, None);
        assert!((a.avg_max - b.avg_max).abs() < 1e-15);
        assert!((a.avg_std - b.avg_std).abs() < 1e-15);
    }
}
