//! Shared oracles for the integration and acceptance suites. Everything in
//! here is independent of the implementation paths it checks: brute-force
//! enumeration, dense Jacobi eigenvalues, and central finite differences.

#![allow(dead_code)]

use diffog_core::qp::QpInstance;
use diffog_core::tensor::{dot, Matrix, NodeId, ParamStore, Tape};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// |got - want| <= max(abs_floor, rel * max(|got|, |want|)).
pub fn assert_rel_close(got: f64, want: f64, rel: f64, abs_floor: f64, context: &str) {
    let tol = abs_floor.max(rel * got.abs().max(want.abs()));
    assert!(
        (got - want).abs() <= tol,
        "{context}: got {got}, want {want} (tol {tol})"
    );
}

pub fn rel_close(got: f64, want: f64, rel: f64, abs_floor: f64) -> bool {
    let tol = abs_floor.max(rel * got.abs().max(want.abs()));
    (got - want).abs() <= tol
}

/// Central finite difference of a scalar function.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Checks every parameter entry of `store` against central finite
/// differences of the scalar the builder produces.
pub fn tape_grad_check(
    store: &mut ParamStore,
    build: impl Fn(&mut Tape, &ParamStore) -> NodeId,
    step: f64,
    rel: f64,
    abs_floor: f64,
    context: &str,
) {
    let mut tape = Tape::new();
    let root = build(&mut tape, store);
    let grads = tape.backward(root).unwrap();

    for p in 0..store.len() {
        for k in 0..store.value(p).len() {
            let original = store.value(p).data()[k];
            store.value_mut(p).data_mut()[k] = original + step;
            let mut plus_tape = Tape::new();
            let plus_root = build(&mut plus_tape, store);
            let f_plus = plus_tape.value(plus_root).get(0, 0);

            store.value_mut(p).data_mut()[k] = original - step;
            let mut minus_tape = Tape::new();
            let minus_root = build(&mut minus_tape, store);
            let f_minus = minus_tape.value(minus_root).get(0, 0);

            store.value_mut(p).data_mut()[k] = original;
            let fd = (f_plus - f_minus) / (2.0 * step);
            let analytic = grads.get(p).map(|g| g.data()[k]).unwrap_or(0.0);
            assert_rel_close(
                analytic,
                fd,
                rel,
                abs_floor,
                &format!("{context}: param {} entry {k}", store.name(p)),
            );
        }
    }
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method.
pub fn jacobi_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    assert_eq!(n, a.cols());
    let mut m = a.clone();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = m.get(p, k);
                    let aqk = m.get(q, k);
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    (0..n).map(|i| m.get(i, i)).collect()
}

pub fn min_eigenvalue(a: &Matrix) -> f64 {
    jacobi_eigenvalues(a)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

/// Random SPD matrix `M' M + jitter I`.
pub fn random_spd(n: usize, jitter: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let m = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let mut a = m.transpose().matmul(&m).unwrap();
    for i in 0..n {
        a.set(i, i, a.get(i, i) + jitter);
    }
    a
}

/// Box-constrained instance `|y_i| <= radius_i` with G = [I; -I].
pub fn box_instance(quad: Matrix, lin: Vec<f64>, radius: &[f64]) -> QpInstance {
    let n = lin.len();
    let mut g = Matrix::zeros(2 * n, n);
    let mut h = Vec::with_capacity(2 * n);
    for i in 0..n {
        g.set(i, i, 1.0);
        h.push(radius[i]);
    }
    for i in 0..n {
        g.set(n + i, i, -1.0);
        h.push(radius[i]);
    }
    QpInstance::new(quad, lin, g, h).unwrap()
}

pub fn random_box_instance(n: usize, rng: &mut ChaCha8Rng) -> (QpInstance, Vec<f64>) {
    let quad = random_spd(n, 0.3, rng);
    let lin: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let radius: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..0.8)).collect();
    (box_instance(quad, lin.clone(), &radius), radius)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum VarState {
    Free,
    Upper,
    Lower,
}

/// Exact optimum of a box-constrained strictly convex QP by enumeration of
/// active-set sign patterns (free / at upper / at lower per variable). The
/// first KKT-consistent pattern is the unique global optimum by strict
/// convexity, so visit order is only a matter of speed: patterns are walked
/// outward by Hamming distance from a clipped-unconstrained-solution guess,
/// which keeps n = 16 instances tractable while staying exhaustive.
pub fn box_qp_oracle(quad: &Matrix, lin: &[f64], radius: &[f64]) -> Vec<f64> {
    let n = lin.len();
    let tol = 1e-9;

    let guess: Vec<VarState> = {
        let factor = diffog_core::tensor::cholesky_spd(quad).expect("SPD quadratic term");
        let neg: Vec<f64> = lin.iter().map(|v| -v).collect();
        let unconstrained = diffog_core::tensor::cholesky_solve(&factor, &neg).unwrap();
        unconstrained
            .iter()
            .zip(radius)
            .map(|(y, r)| {
                if *y > *r {
                    VarState::Upper
                } else if *y < -r {
                    VarState::Lower
                } else {
                    VarState::Free
                }
            })
            .collect()
    };
    let alternatives = |s: VarState| -> [VarState; 2] {
        match s {
            VarState::Free => [VarState::Upper, VarState::Lower],
            VarState::Upper => [VarState::Free, VarState::Lower],
            VarState::Lower => [VarState::Free, VarState::Upper],
        }
    };

    for distance in 0..=n {
        let mut found: Option<Vec<f64>> = None;
        enumerate_subsets(n, distance, &mut |changed| {
            if found.is_some() {
                return;
            }
            // Each changed coordinate takes one of its two other states.
            let k = changed.len();
            for choice_bits in 0..(1u32 << k) {
                let mut state = guess.clone();
                for (b, &var) in changed.iter().enumerate() {
                    state[var] = alternatives(guess[var])[(choice_bits >> b & 1) as usize];
                }
                if let Some(candidate) = try_pattern(quad, lin, radius, &state, tol) {
                    found = Some(candidate);
                    return;
                }
            }
        });
        if let Some(solution) = found {
            return solution;
        }
    }
    panic!("no KKT-consistent active set found");
}

/// Plain full enumeration over all 3^n patterns; used to validate the
/// guess-centered walk on small instances.
pub fn box_qp_oracle_full(quad: &Matrix, lin: &[f64], radius: &[f64]) -> Vec<f64> {
    let n = lin.len();
    assert!(n <= 9, "full enumeration limited to 3^9");
    let tol = 1e-9;
    let mut pattern = vec![VarState::Free; n];
    let states = [VarState::Free, VarState::Upper, VarState::Lower];
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        for slot in pattern.iter_mut() {
            *slot = states[c % 3];
            c /= 3;
        }
        if let Some(candidate) = try_pattern(quad, lin, radius, &pattern, tol) {
            return candidate;
        }
    }
    panic!("no KKT-consistent pattern in full enumeration");
}

fn enumerate_subsets(n: usize, k: usize, visit: &mut impl FnMut(&[usize])) {
    let mut subset = Vec::with_capacity(k);
    fn recurse(
        n: usize,
        k: usize,
        start: usize,
        subset: &mut Vec<usize>,
        visit: &mut impl FnMut(&[usize]),
    ) {
        if subset.len() == k {
            visit(subset);
            return;
        }
        for v in start..n {
            if n - v < k - subset.len() {
                break;
            }
            subset.push(v);
            recurse(n, k, v + 1, subset, visit);
            subset.pop();
        }
    }
    recurse(n, k, 0, &mut subset, visit);
}

fn try_pattern(
    quad: &Matrix,
    lin: &[f64],
    radius: &[f64],
    state: &[VarState],
    tol: f64,
) -> Option<Vec<f64>> {
    let n = lin.len();
    let free: Vec<usize> = (0..n)
        .filter(|&i| state[i] == VarState::Free)
        .collect();
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = match state[i] {
            VarState::Upper => radius[i],
            VarState::Lower => -radius[i],
            VarState::Free => 0.0,
        };
    }
    if !free.is_empty() {
        let nf = free.len();
        let reduced = Matrix::from_fn(nf, nf, |a, b| quad.get(free[a], free[b]));
        let mut rhs = vec![0.0; nf];
        for (a, &i) in free.iter().enumerate() {
            let mut v = -lin[i];
            for j in 0..n {
                if state[j] != VarState::Free {
                    v -= quad.get(i, j) * y[j];
                }
            }
            rhs[a] = v;
        }
        let solved = diffog_core::tensor::lu_solve(&reduced, &rhs).ok()?;
        for (a, &i) in free.iter().enumerate() {
            y[i] = solved[a];
        }
    }
    // Primal feasibility of the free variables.
    for &i in &free {
        if y[i].abs() > radius[i] + tol {
            return None;
        }
    }
    // Dual feasibility of the active ones.
    let mut grad = quad.matvec(&y).unwrap();
    for i in 0..n {
        grad[i] += lin[i];
    }
    for i in 0..n {
        match state[i] {
            VarState::Free => {
                if grad[i].abs() > tol {
                    return None;
                }
            }
            VarState::Upper => {
                if grad[i] > tol {
                    return None;
                }
            }
            VarState::Lower => {
                if grad[i] < -tol {
                    return None;
                }
            }
        }
    }
    Some(y)
}

/// Exact optimum of a general small-m inequality QP by enumerating all 2^m
/// active subsets of constraint rows.
pub fn general_qp_oracle(inst: &QpInstance) -> Vec<f64> {
    let n = inst.num_vars();
    let m = inst.num_constraints();
    assert!(m <= 16, "oracle enumeration limited to small m");
    let tol = 1e-9;
    for mask in 0u32..(1 << m) {
        let active: Vec<usize> = (0..m).filter(|&r| mask >> r & 1 == 1).collect();
        let k = active.len();
        let dim = n + k;
        let mut kkt = Matrix::zeros(dim, dim);
        let mut rhs = vec![0.0; dim];
        for i in 0..n {
            for j in 0..n {
                kkt.set(i, j, inst.quad().get(i, j));
            }
            rhs[i] = -inst.lin()[i];
        }
        for (a, &row) in active.iter().enumerate() {
            for j in 0..n {
                kkt.set(j, n + a, inst.ineq().get(row, j));
                kkt.set(n + a, j, inst.ineq().get(row, j));
            }
            rhs[n + a] = inst.bound()[row];
        }
        let solved = match diffog_core::tensor::lu_solve(&kkt, &rhs) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let y = &solved[..n];
        let lambda = &solved[n..];
        if lambda.iter().any(|l| *l < -tol) {
            continue;
        }
        let gy = inst.ineq().matvec(y).unwrap();
        let feasible = gy
            .iter()
            .zip(inst.bound())
            .all(|(g, h)| *g <= h + tol);
        if feasible {
            return y.to_vec();
        }
    }
    panic!("no KKT-consistent active subset found");
}

/// Value of the quadratic objective.
pub fn objective(inst: &QpInstance, y: &[f64]) -> f64 {
    let py = inst.quad().matvec(y).unwrap();
    0.5 * dot(y, &py) + dot(inst.lin(), y)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
