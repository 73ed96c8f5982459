//! Quadratic control Lyapunov function synthesis.
//!
//! The plant is linearized about its target equilibrium in error
//! coordinates, and the continuous-time algebraic Riccati equation
//!
//! ```text
//! AᵀP + PA − PBR⁻¹BᵀP + Q = 0
//! ```
//!
//! is solved by Newton–Kleinman iteration, each step of which is a dense
//! Lyapunov solve. The stabilizing solution `P` defines `V(e) = eᵀPe`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Environment;
use crate::sim::ControlAffineModel;

/// Central-difference step for linearization.
pub const FD_STEP: f64 = 1e-5;
const NK_TOL: f64 = 1e-10;
const NK_MAX_ITER: usize = 100;

#[derive(Debug, Error)]
pub enum ClfError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("point is not an equilibrium: ‖f + g·u‖ = {0:e}")]
    NotEquilibrium(f64),
    #[error("non-finite finite-difference derivative in column {0}")]
    NonFinite(usize),
    #[error("matrix is not Hurwitz (max real eigenvalue part {0:e})")]
    Unstable(f64),
    #[error("Lyapunov system is singular")]
    Singular,
    #[error("{0} must be symmetric positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("no stabilizing initial gain found")]
    NoStabilizingGain,
    #[error("Newton–Kleinman iteration did not converge (last step {0:e})")]
    Diverged(f64),
    #[error("malformed CLF file: {0}")]
    Format(String),
}

/// `ė ≈ A·e + B·u` about an equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self, ClfError> {
        if !a.is_square() || b.nrows() != a.nrows() {
            return Err(ClfError::Dimension(format!(
                "A is {}×{}, B is {}×{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
}

/// Linearizes the nominal dynamics of `model` about `(x_eq, u_eq)`.
///
/// `A` comes from central differences of `f(x) + g(x)·u_eq` and `B = g(x_eq)`.
pub fn linearize(
    model: &ControlAffineModel,
    x_eq: &DVector<f64>,
    u_eq: &DVector<f64>,
) -> Result<LinearModel, ClfError> {
    let n = model.state_dim();
    if x_eq.len() != n || u_eq.len() != model.input_dim() {
        return Err(ClfError::Dimension(format!(
            "model is {}-state/{}-input, got x_eq of length {} and u_eq of length {}",
            n,
            model.input_dim(),
            x_eq.len(),
            u_eq.len()
        )));
    }
    let residual = model.nominal_derivative(x_eq, u_eq).amax();
    if !(residual < 1e-6) {
        return Err(ClfError::NotEquilibrium(residual));
    }

    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut plus = x_eq.clone();
        let mut minus = x_eq.clone();
        plus[j] += FD_STEP;
        minus[j] -= FD_STEP;
        let col = (model.nominal_derivative(&plus, u_eq) - model.nominal_derivative(&minus, u_eq)) / (2.0 * FD_STEP);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(ClfError::NonFinite(j));
        }
        a.set_column(j, &col);
    }
    let b = model.input_gain(x_eq);
    Ok(LinearModel { a, b })
}

/// Largest real part over the eigenvalues of `a`.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    spectral_abscissa(a) < 0.0
}

/// Solves `AᵀX + XA + Q = 0` for Hurwitz `A` through the vectorized
/// `n²×n²` system `(I⊗Aᵀ + Aᵀ⊗I)·vec(X) = −vec(Q)`.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, ClfError> {
    let n = a.nrows();
    if !a.is_square() || q.shape() != (n, n) {
        return Err(ClfError::Dimension(format!(
            "A is {:?}, Q is {:?}",
            a.shape(),
            q.shape()
        )));
    }
    let abscissa = spectral_abscissa(a);
    if !(abscissa < 0.0) {
        return Err(ClfError::Unstable(abscissa));
    }

    // Column-major vec: X[(i, j)] lives at i + j·n.
    let idx = |i: usize, j: usize| i + j * n;
    let mut m = DMatrix::zeros(n * n, n * n);
    for j in 0..n {
        for i in 0..n {
            let row = idx(i, j);
            for k in 0..n {
                m[(row, idx(k, j))] += a[(k, i)];
                m[(row, idx(i, k))] += a[(k, j)];
            }
        }
    }
    let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let sol = m.lu().solve(&rhs).ok_or(ClfError::Singular)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(ClfError::Singular);
    }
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// `AᵀP + PA − PBR⁻¹BᵀP + Q`.
pub fn are_residual(
    lin: &LinearModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ClfError> {
    let r_inv = spd_inverse(r, "R")?;
    let (a, b) = (&lin.a, &lin.b);
    Ok(a.transpose() * p + p * a - p * b * r_inv * b.transpose() * p + q)
}

fn spd_inverse(m: &DMatrix<f64>, name: &'static str) -> Result<DMatrix<f64>, ClfError> {
    if !is_symmetric(m, 1e-10) {
        return Err(ClfError::NotPositiveDefinite(name));
    }
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(ClfError::NotPositiveDefinite(name))
}

fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

/// A gain `K` with `A − BK` Hurwitz.
///
/// Tries, in order: `K = 0` when `A` is already Hurwitz; Bass's construction
/// `K = R⁻¹BᵀZ⁻¹` with `(A+σI)Z + Z(A+σI)ᵀ = 2BR⁻¹Bᵀ`; and finally the
/// Riccati gain of the shifted pair `(A − σI, B)`.
fn stabilizing_gain(lin: &LinearModel, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, ClfError> {
    let (a, b) = (&lin.a, &lin.b);
    let (n, m) = (lin.state_dim(), lin.input_dim());
    if is_hurwitz(a) {
        return Ok(DMatrix::zeros(m, n));
    }
    let r_inv = spd_inverse(r, "R")?;
    let eye = DMatrix::<f64>::identity(n, n);
    let radius = a.complex_eigenvalues().iter().map(|l| l.re.abs()).fold(0.0, f64::max);

    let sigma = 1.0 + radius;
    let shifted = -(a + &eye * sigma).transpose();
    let rhs = b * &r_inv * b.transpose() * 2.0;
    if let Ok(z) = solve_lyapunov(&shifted, &rhs) {
        if let Some(chol) = z.clone().cholesky() {
            let k = &r_inv * b.transpose() * chol.inverse();
            if is_hurwitz(&(a - b * &k)) {
                return Ok(k);
            }
        }
    }

    let sigma = 1.0 + spectral_abscissa(a);
    let shifted = LinearModel {
        a: a - &eye * sigma,
        b: b.clone(),
    };
    let p = newton_kleinman(&shifted, q, r, DMatrix::zeros(m, n))?;
    let k = &r_inv * b.transpose() * p;
    if is_hurwitz(&(a - b * &k)) {
        Ok(k)
    } else {
        Err(ClfError::NoStabilizingGain)
    }
}

fn newton_kleinman(
    lin: &LinearModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    k0: DMatrix<f64>,
) -> Result<DMatrix<f64>, ClfError> {
    let r_inv = spd_inverse(r, "R")?;
    let (a, b) = (&lin.a, &lin.b);
    let mut k = k0;
    let mut prev: Option<DMatrix<f64>> = None;
    let mut step = f64::INFINITY;
    for _ in 0..NK_MAX_ITER {
        let closed = a - b * &k;
        let weight = q + k.transpose() * r * &k;
        let p = solve_lyapunov(&closed, &weight).map_err(|e| match e {
            ClfError::Unstable(_) | ClfError::Singular => ClfError::Diverged(step),
            other => other,
        })?;
        k = &r_inv * b.transpose() * &p;
        if let Some(prev) = &prev {
            step = (&p - prev).amax();
            // Past the absolute tolerance, or stalled at round-off for large P.
            if step < NK_TOL || step < 1e-10 * p.amax() {
                return Ok(p);
            }
        }
        prev = Some(p);
    }
    Err(ClfError::Diverged(step))
}

/// Stabilizing solution of the continuous-time ARE, packaged as a CLF with
/// baseline rate `eta0`.
pub fn solve_are(lin: &LinearModel, q: &DMatrix<f64>, r: &DMatrix<f64>, eta0: f64) -> Result<QuadraticClf, ClfError> {
    let (n, m) = (lin.state_dim(), lin.input_dim());
    if q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(ClfError::Dimension(format!(
            "Q is {:?} and R is {:?} for a {n}-state, {m}-input model",
            q.shape(),
            r.shape()
        )));
    }
    if !is_symmetric(q, 1e-10) {
        return Err(ClfError::NotPositiveDefinite("Q"));
    }
    spd_inverse(r, "R")?;
    let k0 = stabilizing_gain(lin, q, r)?;
    let p = newton_kleinman(lin, q, r, k0)?;
    let mut clf = QuadraticClf::new(p, eta0)?;
    clf.q = Some(q.clone());
    clf.r = Some(r.clone());
    Ok(clf)
}

/// `V(e) = eᵀPe` with symmetric positive definite `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticClf {
    p: DMatrix<f64>,
    /// LQR weights that produced `P`, absent for hand-specified CLFs.
    pub q: Option<DMatrix<f64>>,
    pub r: Option<DMatrix<f64>>,
    pub eta0: f64,
}

impl QuadraticClf {
    pub fn new(p: DMatrix<f64>, eta0: f64) -> Result<Self, ClfError> {
        if !is_symmetric(&p, 1e-10) || p.clone().cholesky().is_none() {
            return Err(ClfError::NotPositiveDefinite("P"));
        }
        Ok(Self {
            p: (&p + p.transpose()) * 0.5,
            q: None,
            r: None,
            eta0,
        })
    }

    /// `V(e) = ‖e‖²`.
    pub fn identity(n: usize, eta0: f64) -> Self {
        Self {
            p: DMatrix::identity(n, n),
            q: None,
            r: None,
            eta0,
        }
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn value(&self, e: &DVector<f64>) -> f64 {
        e.dot(&(&self.p * e))
    }

    /// `(V(e), ∂V/∂e = 2Pe)`.
    pub fn eval(&self, e: &DVector<f64>) -> (f64, DVector<f64>) {
        let pe = &self.p * e;
        (e.dot(&pe), pe * 2.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.p
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> String {
        let flat = |m: &DMatrix<f64>| m.transpose().iter().copied().collect::<Vec<_>>();
        let file = ClfFile {
            p: flat(&self.p),
            eta0: self.eta0,
            q: self.q.as_ref().map(flat),
            r: self.r.as_ref().map(flat),
        };
        serde_json::to_string_pretty(&file).expect("CLF serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ClfError> {
        let file: ClfFile = serde_json::from_str(text).map_err(|e| ClfError::Format(e.to_string()))?;
        let square = |name: &str, data: &[f64]| -> Result<DMatrix<f64>, ClfError> {
            let n = (data.len() as f64).sqrt().round() as usize;
            if n == 0 || n * n != data.len() {
                return Err(ClfError::Format(format!(
                    "{name} has {} entries, not a square",
                    data.len()
                )));
            }
            Ok(DMatrix::from_row_slice(n, n, data))
        };
        let mut clf = Self::new(square("P", &file.p)?, file.eta0)?;
        clf.q = file.q.as_deref().map(|d| square("Q", d)).transpose()?;
        clf.r = file.r.as_deref().map(|d| square("R", d)).transpose()?;
        Ok(clf)
    }
}

/// On-disk CLF: square matrices as flat row-major arrays.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClfFile {
    #[serde(rename = "P")]
    p: Vec<f64>,
    eta0: f64,
    #[serde(rename = "Q", default)]
    q: Option<Vec<f64>>,
    #[serde(rename = "R", default)]
    r: Option<Vec<f64>>,
}

/// LQR-synthesized CLF for `env` with identity weights, linearized at the
/// target in error coordinates.
pub fn lqr_clf(env: &Environment, eta0: f64) -> Result<QuadraticClf, ClfError> {
    let model = env.error_model();
    let n = model.state_dim();
    let m = model.input_dim();
    let lin = linearize(&model, &DVector::zeros(n), &DVector::zeros(m))?;
    solve_are(&lin, &DMatrix::identity(n, n), &DMatrix::identity(m, m), eta0)
}
