//! Exact solver for the small CLF-QP
//!
//! ```text
//! min_{u, ε}  uᵀHu − 2cᵀu + K·ε
//! s.t.        aᵀu − ε ≤ b,   ε ≥ 0,   lo ≤ u ≤ hi
//! ```
//!
//! `H` is the input block of the Hessian; the slack enters linearly, so its
//! row and column of the full Hessian are zero. With at most three inputs
//! every active set (each coordinate free, at its lower or at its upper
//! bound; the CLF row inactive, tight, or relaxed through the slack) is
//! enumerated and solved in closed form. The cheapest primal-feasible
//! candidate is the global minimizer because the problem is convex.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Above this many inputs enumeration (3^m · 3 candidates) stops being cheap.
pub const MAX_INPUTS: usize = 6;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("malformed QP: {0}")]
    Malformed(String),
    #[error("no feasible active set found for {0}")]
    Numerical(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpInstance {
    /// Input block of the Hessian, symmetric positive definite.
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    /// CLF constraint row.
    pub a: DVector<f64>,
    pub b_rhs: f64,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Linear penalty on the slack.
    pub slack_penalty: f64,
}

impl fmt::Display for QpInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "QP{{H={:?}, c={:?}, a={:?}, b={:e}, lo={:?}, hi={:?}, K={:e}}}",
            self.h.as_slice(),
            self.c.as_slice(),
            self.a.as_slice(),
            self.b_rhs,
            self.lower.as_slice(),
            self.upper.as_slice(),
            self.slack_penalty
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClfStatus {
    /// `aᵀu < b`, no slack.
    Inactive,
    /// `aᵀu = b`, no slack.
    Tight,
    /// `aᵀu = b + ε` with `ε > 0`.
    Relaxed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    pub clf: ClfStatus,
    pub at_lower: Vec<usize>,
    pub at_upper: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub slack: f64,
    pub active_set: ActiveSet,
    pub objective: f64,
    /// Multiplier of the CLF row.
    pub clf_multiplier: f64,
    /// Relative KKT residual (stationarity, dual feasibility,
    /// complementarity and primal feasibility).
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

impl QpInstance {
    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// `uᵀHu − 2cᵀu + K·ε`.
    pub fn objective(&self, u: &DVector<f64>, slack: f64) -> f64 {
        u.dot(&(&self.h * u)) - 2.0 * self.c.dot(u) + self.slack_penalty * slack
    }

    fn validate(&self) -> Result<(), QpError> {
        let m = self.dim();
        if m == 0 || m > MAX_INPUTS {
            return Err(QpError::Malformed(format!("{m} inputs")));
        }
        if self.h.shape() != (m, m) || self.a.len() != m || self.lower.len() != m || self.upper.len() != m {
            return Err(QpError::Malformed(format!("inconsistent dimensions in {self}")));
        }
        let finite = self
            .h
            .iter()
            .chain(self.c.iter())
            .chain(self.a.iter())
            .all(|v| v.is_finite())
            && self.b_rhs.is_finite()
            && self.slack_penalty.is_finite();
        if !finite {
            return Err(QpError::Malformed(format!("non-finite data in {self}")));
        }
        if !(self.slack_penalty > 0.0) {
            return Err(QpError::Malformed("slack penalty must be positive".into()));
        }
        if (0..m).any(|i| !(self.lower[i] <= self.upper[i])) {
            return Err(QpError::Malformed(format!("empty box in {self}")));
        }
        if (&self.h - self.h.transpose()).amax() > 1e-12 * (1.0 + self.h.amax()) || self.h.clone().cholesky().is_none()
        {
            return Err(QpError::Malformed("H must be symmetric positive definite".into()));
        }
        Ok(())
    }

    fn candidate(&self, bounds: &[Bound], status: ClfStatus) -> Option<QpSolution> {
        let m = self.dim();
        let free: Vec<usize> = (0..m).filter(|&i| bounds[i] == Bound::Free).collect();
        let mut u = DVector::zeros(m);
        for i in 0..m {
            match bounds[i] {
                Bound::Lower => u[i] = self.lower[i],
                Bound::Upper => u[i] = self.upper[i],
                Bound::Free => {}
            }
        }

        // Free block: H_FF u_F = c_F − H_FB u_B − (μ/2) a_F.
        let nf = free.len();
        let mut multiplier = match status {
            ClfStatus::Inactive | ClfStatus::Tight => 0.0,
            ClfStatus::Relaxed => self.slack_penalty,
        };
        if nf > 0 {
            let h_ff = DMatrix::from_fn(nf, nf, |r, c| self.h[(free[r], free[c])]);
            let chol = h_ff.cholesky()?;
            let hu_b = &self.h * &u;
            let base = DVector::from_fn(nf, |r, _| self.c[free[r]] - hu_b[free[r]]);
            let a_f = DVector::from_fn(nf, |r, _| self.a[free[r]]);
            let u0 = chol.solve(&base);
            let h_inv_a = chol.solve(&a_f);
            let u_f = match status {
                ClfStatus::Inactive => u0,
                ClfStatus::Relaxed => u0 - &h_inv_a * (0.5 * multiplier),
                ClfStatus::Tight => {
                    let curvature = a_f.dot(&h_inv_a);
                    if curvature <= 1e-14 * (1.0 + a_f.norm_squared()) {
                        return None;
                    }
                    let fixed: f64 = (0..m)
                        .filter(|i| bounds[*i] != Bound::Free)
                        .map(|i| self.a[i] * u[i])
                        .sum();
                    let target = self.b_rhs - fixed;
                    multiplier = 2.0 * (a_f.dot(&u0) - target) / curvature;
                    u0 - &h_inv_a * (0.5 * multiplier)
                }
            };
            for (r, &i) in free.iter().enumerate() {
                u[i] = u_f[r];
            }
        } else if status == ClfStatus::Tight {
            return None;
        }

        let scale = 1.0 + self.lower.amax().max(self.upper.amax());
        let tol = 1e-10 * scale;
        for &i in &free {
            if u[i] < self.lower[i] - tol || u[i] > self.upper[i] + tol {
                return None;
            }
            u[i] = u[i].clamp(self.lower[i], self.upper[i]);
        }

        let excess = self.a.dot(&u) - self.b_rhs;
        let row_tol = 1e-9 * (1.0 + self.b_rhs.abs() + self.a.amax() * scale);
        let slack = match status {
            ClfStatus::Inactive => {
                if excess > row_tol {
                    return None;
                }
                0.0
            }
            ClfStatus::Tight => 0.0,
            ClfStatus::Relaxed => {
                if excess < -row_tol {
                    return None;
                }
                excess.max(0.0)
            }
        };

        let at_lower = (0..m).filter(|&i| bounds[i] == Bound::Lower).collect();
        let at_upper = (0..m).filter(|&i| bounds[i] == Bound::Upper).collect();
        let mut sol = QpSolution {
            objective: self.objective(&u, slack),
            u,
            slack,
            active_set: ActiveSet {
                clf: status,
                at_lower,
                at_upper,
            },
            clf_multiplier: multiplier,
            kkt_residual: 0.0,
        };
        sol.kkt_residual = self.kkt_residual(&sol, bounds);
        Some(sol)
    }

    fn kkt_residual(&self, sol: &QpSolution, bounds: &[Bound]) -> f64 {
        let mu = sol.clf_multiplier;
        let hu = &self.h * &sol.u * 2.0;
        let grad = &hu - &self.c * 2.0 + &self.a * mu;
        let scale = 1.0 + hu.amax().max(2.0 * self.c.amax()).max((&self.a * mu).amax());

        let mut worst: f64 = 0.0;
        for (i, b) in bounds.iter().enumerate() {
            let violation = match b {
                Bound::Free => grad[i].abs(),
                // Lower-bound multiplier is grad[i], upper is −grad[i]; both ≥ 0.
                Bound::Lower => (-grad[i]).max(0.0),
                Bound::Upper => grad[i].max(0.0),
            };
            worst = worst.max(violation / scale);
        }
        let slack_mult = self.slack_penalty - mu;
        let k_scale = self.slack_penalty;
        worst = worst
            .max((-mu).max(0.0) / k_scale)
            .max((-slack_mult).max(0.0) / k_scale);
        let row = self.a.dot(&sol.u) - sol.slack - self.b_rhs;
        let row_scale = 1.0 + self.b_rhs.abs() + self.a.amax() * (1.0 + sol.u.amax());
        worst = worst.max(row.max(0.0) / row_scale);
        worst = worst.max((mu * row).abs() / (k_scale * row_scale));
        worst.max(slack_mult.max(0.0) * sol.slack / (k_scale * (1.0 + sol.slack)))
    }
}

/// Exact minimizer by active-set enumeration.
pub fn solve_qp(qp: &QpInstance) -> Result<QpSolution, QpError> {
    qp.validate()?;
    let m = qp.dim();
    let mut best: Option<QpSolution> = None;
    let mut bounds = vec![Bound::Free; m];
    for code in 0..3usize.pow(m as u32) {
        let mut rest = code;
        for b in bounds.iter_mut() {
            *b = match rest % 3 {
                0 => Bound::Free,
                1 => Bound::Lower,
                _ => Bound::Upper,
            };
            rest /= 3;
        }
        for status in [ClfStatus::Inactive, ClfStatus::Tight, ClfStatus::Relaxed] {
            let Some(cand) = qp.candidate(&bounds, status) else {
                continue;
            };
            best = Some(match best {
                None => cand,
                Some(cur) => {
                    let tie = 1e-12 * (1.0 + cur.objective.abs());
                    if cand.objective < cur.objective - tie
                        || (cand.objective <= cur.objective + tie && cand.kkt_residual < cur.kkt_residual)
                    {
                        cand
                    } else {
                        cur
                    }
                }
            });
        }
    }
    best.ok_or_else(|| QpError::Numerical(qp.to_string()))
}
