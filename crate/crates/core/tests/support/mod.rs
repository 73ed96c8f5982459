//! Random problem generators and independent oracles shared by test targets.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sacclf_core::clf::{are_residual, is_hurwitz, LinearModel};
use sacclf_core::{solve_are, solve_qp, QpInstance};

pub fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Random `(A, B, Q, R)` with n ≤ 7, m ≤ 3; dense random `B` keeps the pair
/// controllable with probability one.
pub fn random_lqr_problem(rng: &mut ChaCha8Rng) -> (LinearModel, DMatrix<f64>, DMatrix<f64>) {
    let n = rng.gen_range(1..=7);
    let m = rng.gen_range(1..=n.min(3));
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-2.0..2.0));
    let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
    let lin = LinearModel::new(a, b).unwrap();
    let q = if rng.gen_bool(0.5) {
        DMatrix::identity(n, n)
    } else {
        random_spd(n, rng)
    };
    let r = if rng.gen_bool(0.5) {
        DMatrix::identity(m, m)
    } else {
        random_spd(m, rng)
    };
    (lin, q, r)
}

/// Max-norm ARE residual and closed-loop stability of the solver's answer.
pub fn are_quality(lin: &LinearModel, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<(f64, bool), String> {
    let clf = solve_are(lin, q, r, 0.1).map_err(|e| format!("{e}: A={} B={} Q={} R={}", lin.a, lin.b, q, r))?;
    let p = clf.p();
    let res = are_residual(lin, q, r, p).map_err(|e| e.to_string())?.amax();
    let r_inv = r.clone().try_inverse().ok_or("singular R")?;
    let closed = &lin.a - &lin.b * r_inv * lin.b.transpose() * p;
    Ok((res, is_hurwitz(&closed)))
}

pub fn random_qp_instance(m: usize, rng: &mut ChaCha8Rng) -> QpInstance {
    let beta: f64 = if rng.gen_bool(0.5) { 0.0 } else { 1.0 };
    let bound = rng.gen_range(0.3..3.0);
    let lower = DVector::from_element(m, -bound);
    let upper = DVector::from_element(m, bound);
    let a = DVector::from_fn(m, |_, _| rng.gen_range(-3.0..3.0));
    let reachable_min: f64 = a.iter().map(|ai: &f64| -ai.abs() * bound).sum();
    let b_rhs = if rng.gen_bool(0.8) {
        let u = DVector::from_fn(m, |_, _| rng.gen_range(-bound..bound));
        a.dot(&u) + rng.gen_range(0.0..1.0)
    } else {
        reachable_min - rng.gen_range(0.01..1.0)
    };
    QpInstance {
        h: DMatrix::identity(m, m) * (1.0 + beta),
        c: DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0)),
        a,
        b_rhs,
        lower,
        upper,
        slack_penalty: if rng.gen_bool(0.7) {
            1e8
        } else {
            10f64.powf(rng.gen_range(0.0..4.0))
        },
    }
}

/// `min uᵀHu − 2cᵀu + K·max(0, aᵀu − b)` over the box.
pub fn primal(qp: &QpInstance, u: &DVector<f64>) -> f64 {
    qp.objective(u, (qp.a.dot(u) - qp.b_rhs).max(0.0))
}

/// Dual function of the CLF row for diagonal `H = hI`; the box problem is
/// separable so the inner minimizer is a clipped closed form.
fn dual(qp: &QpInstance, lambda: f64) -> f64 {
    let h = qp.h[(0, 0)];
    let u = DVector::from_fn(qp.dim(), |i, _| {
        ((qp.c[i] - 0.5 * lambda * qp.a[i]) / h).clamp(qp.lower[i], qp.upper[i])
    });
    qp.objective(&u, 0.0) + lambda * (qp.a.dot(&u) - qp.b_rhs)
}

/// Refined grid over the multiplier λ ∈ [0, K]; a primal grid is hopeless
/// with K = 1e8 on the slack.
pub fn dual_grid_oracle(qp: &QpInstance) -> f64 {
    let (mut lo, mut hi) = (0.0, qp.slack_penalty);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..40 {
        let n = 64;
        let width = (hi - lo) / n as f64;
        let mut arg = lo;
        for k in 0..=n {
            let l = lo + width * k as f64;
            let g = dual(qp, l);
            if g > best {
                best = g;
                arg = l;
            }
        }
        lo = (arg - width).max(0.0);
        hi = (arg + width).min(qp.slack_penalty);
    }
    best
}

pub fn primal_ternary_oracle(qp: &QpInstance) -> f64 {
    let (mut lo, mut hi) = (qp.lower[0], qp.upper[0]);
    let f = |u: f64| primal(qp, &DVector::from_element(1, u));
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) <= f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    f(0.5 * (lo + hi))
}

#[derive(Debug, Default, Clone, Copy)]
pub struct QpSweep {
    /// Largest `|solver − oracle| / max(1, |objective|)`.
    pub worst_objective_gap: f64,
    pub worst_kkt: f64,
    pub infeasible: usize,
}

/// Solves `count` seeded instances, alternating m = 1 and m = 3.
pub fn qp_sweep(seed: u64, count: usize) -> QpSweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = QpSweep::default();
    for k in 0..count {
        let m = if k % 2 == 0 { 1 } else { 3 };
        let qp = random_qp_instance(m, &mut rng);
        let sol = solve_qp(&qp).unwrap_or_else(|e| panic!("{qp}: {e}"));
        let scale = 1.0f64.max(sol.objective.abs());
        let mut gap = (sol.objective - dual_grid_oracle(&qp)).abs() / scale;
        if m == 1 {
            gap = gap.max((sol.objective - primal_ternary_oracle(&qp)).abs() / scale);
        }
        out.worst_objective_gap = out.worst_objective_gap.max(gap);
        out.worst_kkt = out.worst_kkt.max(sol.kkt_residual);
        let in_box = sol.u.iter().zip(qp.lower.iter()).all(|(u, l)| *u >= l - 1e-12)
            && sol.u.iter().zip(qp.upper.iter()).all(|(u, h)| *u <= h + 1e-12);
        let feasible = sol.slack >= 0.0 && qp.a.dot(&sol.u) - sol.slack <= qp.b_rhs + 1e-9 * (1.0 + qp.b_rhs.abs());
        if !(in_box && feasible) {
            out.infeasible += 1;
        }
    }
    out
}
