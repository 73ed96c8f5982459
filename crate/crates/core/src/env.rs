//! Benchmark plants: the 2-D nonlinear NCT system and rigid-body satellite
//! attitude dynamics with scalar-last quaternions.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use thiserror::Error;

use crate::sim::{ControlAffineModel, Task};

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("quaternion norm {0} deviates from 1 by more than 1e-6")]
    NonUnitQuaternion(f64),
    #[error("inertia matrix must be symmetric positive definite")]
    BadInertia,
    #[error("invalid environment parameter: {0}")]
    InvalidParameter(String),
}

/// `f(x)` of the NCT system.
pub fn nct_drift(x: &DVector<f64>) -> DVector<f64> {
    let (x1, x2) = (x[0], x[1]);
    let c = (2.0 * x1).cos() + 2.0;
    DVector::from_vec(vec![-x1 + x2, -0.5 * x1 - 0.5 * x2 * (1.0 - c * c)])
}

/// `g(x)` of the NCT system, a 2×1 column.
pub fn nct_gain(x: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(2, 1, &[0.0, (2.0 * x[0]).cos() + 2.0])
}

pub fn nct_dynamics(x: &DVector<f64>, u: f64) -> DVector<f64> {
    nct_drift(x) + nct_gain(x) * u
}

/// Value function of the NCT system under cost `‖x‖² + u²`.
pub fn nct_optimal_value(x: &DVector<f64>) -> f64 {
    0.5 * x[0] * x[0] + x[1] * x[1]
}

/// Optimal feedback `u*(x) = −(cos 2x₁ + 2)·x₂` for the same cost.
pub fn nct_optimal_input(x: &DVector<f64>) -> f64 {
    -((2.0 * x[0]).cos() + 2.0) * x[1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct NctEnv {
    pub u_bound: f64,
    pub horizon: f64,
    pub dt: f64,
    /// Initial states are drawn uniformly from `[-init_box, init_box]²`.
    pub init_box: f64,
}

impl Default for NctEnv {
    fn default() -> Self {
        Self {
            u_bound: 10.0,
            horizon: 10.0,
            dt: 0.01,
            init_box: 1.0,
        }
    }
}

impl NctEnv {
    pub fn model(&self) -> ControlAffineModel {
        ControlAffineModel::new(
            2,
            1,
            Arc::new(nct_drift),
            Arc::new(nct_gain),
            DVector::from_element(1, -self.u_bound),
            DVector::from_element(1, self.u_bound),
        )
        .expect("valid NCT model")
    }
}

/// Scalar-last quaternion rate matrix: `q̇ = ½·R(q)·ω`.
pub fn quaternion_rate_matrix(q: &[f64]) -> DMatrix<f64> {
    let (q0, q1, q2, q3) = (q[0], q[1], q[2], q[3]);
    DMatrix::from_row_slice(
        4,
        3,
        &[
            q3, -q2, q1, //
            q2, q3, -q0, //
            -q1, q0, q3, //
            -q0, -q1, -q2,
        ],
    )
}

fn euler_rates(inertia: &Matrix3<f64>, inertia_inv: &Matrix3<f64>, w: &Vector3<f64>) -> Vector3<f64> {
    inertia_inv * (-w.cross(&(inertia * w)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SatelliteEnv {
    pub inertia: Matrix3<f64>,
    pub torque_bound: f64,
    pub horizon: f64,
    pub dt: f64,
    /// Largest initial error rotation angle, radians.
    pub max_init_angle: f64,
    /// Initial body rates drawn uniformly from `[-max_init_rate, max_init_rate]³`.
    pub max_init_rate: f64,
}

impl Default for SatelliteEnv {
    fn default() -> Self {
        Self {
            inertia: Matrix3::from_diagonal(&Vector3::new(1.0, 0.8, 1.2)),
            torque_bound: 0.5,
            horizon: 60.0,
            dt: 0.1,
            max_init_angle: 30f64.to_radians(),
            max_init_rate: 0.1,
        }
    }
}

/// Full 7-state derivative `[q̇; ω̇]` with `ω̇ = I⁻¹(−ω × Iω + u)`.
pub fn satellite_dynamics(
    x: &DVector<f64>,
    u: &DVector<f64>,
    inertia: &Matrix3<f64>,
) -> Result<DVector<f64>, EnvError> {
    let norm = x.rows(0, 4).norm();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(EnvError::NonUnitQuaternion(norm));
    }
    let inv = inertia.try_inverse().ok_or(EnvError::BadInertia)?;
    let mut dx = satellite_drift(x, inertia, &inv);
    let torque = inv * Vector3::new(u[0], u[1], u[2]);
    for i in 0..3 {
        dx[4 + i] += torque[i];
    }
    Ok(dx)
}

fn satellite_drift(x: &DVector<f64>, inertia: &Matrix3<f64>, inertia_inv: &Matrix3<f64>) -> DVector<f64> {
    let w = Vector3::new(x[4], x[5], x[6]);
    let qdot = quaternion_rate_matrix(&x.as_slice()[..4]) * DVector::from_column_slice(w.as_slice()) * 0.5;
    let wdot = euler_rates(inertia, inertia_inv, &w);
    DVector::from_iterator(7, qdot.iter().chain(wdot.iter()).copied())
}

impl SatelliteEnv {
    pub fn validate(&self) -> Result<(), EnvError> {
        if (self.inertia - self.inertia.transpose()).amax() > 1e-12 || self.inertia.cholesky().is_none() {
            return Err(EnvError::BadInertia);
        }
        Ok(())
    }

    fn inertia_inv(&self) -> Matrix3<f64> {
        self.inertia.try_inverse().expect("inertia is invertible")
    }

    fn torque_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_element(3, -self.torque_bound),
            DVector::from_element(3, self.torque_bound),
        )
    }

    fn input_gain_block(&self, rows: usize) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(rows, 3);
        g.view_mut((rows - 3, 0), (3, 3)).copy_from(&self.inertia_inv());
        g
    }

    /// Seven-state plant; the quaternion is renormalized after every step.
    pub fn model(&self) -> ControlAffineModel {
        let inertia = self.inertia;
        let inv = self.inertia_inv();
        let g = self.input_gain_block(7);
        let (lo, hi) = self.torque_bounds();
        ControlAffineModel::new(
            7,
            3,
            Arc::new(move |x: &DVector<f64>| satellite_drift(x, &inertia, &inv)),
            Arc::new(move |_x: &DVector<f64>| g.clone()),
            lo,
            hi,
        )
        .expect("valid satellite model")
        .with_projection(Arc::new(|x: &mut DVector<f64>| {
            let n = x.rows(0, 4).norm();
            if n > 0.0 {
                x.rows_mut(0, 4).unscale_mut(n);
            }
        }))
    }

    /// Dynamics in the six error coordinates `(q0, q1, q2, ωx, ωy, ωz)`,
    /// with the scalar part recovered as `q3 = √(1 − ‖q_v‖²)`.
    pub fn error_model(&self) -> ControlAffineModel {
        let inertia = self.inertia;
        let inv = self.inertia_inv();
        let g = self.input_gain_block(6);
        let (lo, hi) = self.torque_bounds();
        ControlAffineModel::new(
            6,
            3,
            Arc::new(move |e: &DVector<f64>| {
                let x = Self::state_from_error(e);
                let dx = satellite_drift(&x, &inertia, &inv);
                DVector::from_iterator(6, [0, 1, 2, 4, 5, 6].iter().map(|&i| dx[i]))
            }),
            Arc::new(move |_e: &DVector<f64>| g.clone()),
            lo,
            hi,
        )
        .expect("valid satellite error model")
    }

    fn state_from_error(e: &DVector<f64>) -> DVector<f64> {
        let qv2 = e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
        let q3 = (1.0 - qv2).max(0.0).sqrt();
        DVector::from_vec(vec![e[0], e[1], e[2], q3, e[3], e[4], e[5]])
    }

    pub fn kinetic_energy(&self, x: &DVector<f64>) -> f64 {
        let w = Vector3::new(x[4], x[5], x[6]);
        0.5 * w.dot(&(self.inertia * w))
    }

    /// Uniform random axis, angle uniform in `[0, max_init_angle]`, rates
    /// uniform in the rate box.
    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let axis: Vector3<f64> = loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                break v / n;
            }
        };
        let angle = rng.gen_range(0.0..=self.max_init_angle);
        let (s, c) = (0.5 * angle).sin_cos();
        let r = self.max_init_rate;
        let mut x = DVector::zeros(7);
        for i in 0..3 {
            x[i] = axis[i] * s;
            x[4 + i] = if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        }
        x[3] = c;
        x
    }
}

/// One of the two benchmark plants, with everything an episode needs.
#[derive(Debug, Clone, PartialEq)]
pub enum Environment {
    Nct(NctEnv),
    Satellite(SatelliteEnv),
}

impl Environment {
    pub fn nct() -> Self {
        Environment::Nct(NctEnv::default())
    }

    pub fn satellite() -> Self {
        Environment::Satellite(SatelliteEnv::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Environment::Nct(_) => "nct",
            Environment::Satellite(_) => "satellite",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Environment::Nct(_) => 2,
            Environment::Satellite(_) => 7,
        }
    }

    pub fn error_dim(&self) -> usize {
        match self {
            Environment::Nct(_) => 2,
            Environment::Satellite(_) => 6,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Environment::Nct(_) => 1,
            Environment::Satellite(_) => 3,
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            Environment::Nct(e) => e.dt,
            Environment::Satellite(e) => e.dt,
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            Environment::Nct(e) => e.horizon,
            Environment::Satellite(e) => e.horizon,
        }
    }

    /// Nominal plant in full state coordinates.
    pub fn model(&self) -> ControlAffineModel {
        match self {
            Environment::Nct(e) => e.model(),
            Environment::Satellite(e) => e.model(),
        }
    }

    /// Nominal plant in error coordinates, used for linearization.
    pub fn error_model(&self) -> ControlAffineModel {
        match self {
            Environment::Nct(e) => e.model(),
            Environment::Satellite(e) => e.error_model(),
        }
    }

    /// Target equilibrium `(x_d, u_eq)` in full state coordinates.
    pub fn target(&self) -> (DVector<f64>, DVector<f64>) {
        match self {
            Environment::Nct(_) => (DVector::zeros(2), DVector::zeros(1)),
            Environment::Satellite(_) => {
                let mut x = DVector::zeros(7);
                x[3] = 1.0;
                (x, DVector::zeros(3))
            }
        }
    }

    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            Environment::Nct(e) => DVector::from_fn(2, |_, _| rng.gen_range(-e.init_box..=e.init_box)),
            Environment::Satellite(e) => e.sample_initial_state(rng),
        }
    }

    /// Agent observation: the full plant state.
    pub fn observation(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    /// Episode ends early when the state leaves a generous envelope.
    pub fn is_terminal(&self, x: &DVector<f64>) -> bool {
        if x.iter().any(|v| !v.is_finite()) {
            return true;
        }
        match self {
            Environment::Nct(_) => x.amax() > 20.0,
            Environment::Satellite(_) => x.rows(4, 3).amax() > 5.0,
        }
    }

    pub fn step_cost(&self, x: &DVector<f64>) -> f64 {
        match self {
            Environment::Nct(_) => x[0] * x[0] + x[1] * x[1],
            Environment::Satellite(_) => x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + x.rows(4, 3).norm_squared(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(EnvError::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            Environment::Nct(e) => {
                positive("u_bound", e.u_bound)?;
                positive("horizon", e.horizon)?;
                positive("dt", e.dt)?;
                positive("init_box", e.init_box)
            }
            Environment::Satellite(e) => {
                positive("torque_bound", e.torque_bound)?;
                positive("horizon", e.horizon)?;
                positive("dt", e.dt)?;
                e.validate()
            }
        }
    }
}

impl Task for Environment {
    fn error_state(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Environment::Nct(_) => x.clone(),
            Environment::Satellite(_) => DVector::from_iterator(6, [0, 1, 2, 4, 5, 6].iter().map(|&i| x[i])),
        }
    }

    fn error_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            Environment::Nct(_) => DMatrix::identity(2, 2),
            Environment::Satellite(_) => {
                let mut j = DMatrix::zeros(6, x.len());
                for (row, col) in [0, 1, 2, 4, 5, 6].into_iter().enumerate() {
                    j[(row, col)] = 1.0;
                }
                j
            }
        }
    }

    fn running_cost(&self, x: &DVector<f64>, _u: &DVector<f64>) -> f64 {
        self.step_cost(x)
    }
}
