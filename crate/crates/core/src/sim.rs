//! Control-affine continuous-time simulation.
//!
//! Plants are described as `ẋ = f(x) + g(x)·u + d(x)` and advanced with a
//! classical fixed-step RK4 scheme, holding the control input constant over
//! each step (zero-order hold).

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type VectorField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type GainField = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type Projection = Arc<dyn Fn(&mut DVector<f64>) + Send + Sync>;

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("integration failure: non-finite derivative in component {component} (stage {stage})")]
    NonFinite { component: usize, stage: usize },
    #[error("invalid step size {0}")]
    InvalidStep(f64),
    #[error("invalid horizon {horizon} for step {dt}")]
    InvalidHorizon { horizon: f64, dt: f64 },
    #[error("controller failed at step {step}: {source}")]
    Controller {
        step: usize,
        #[source]
        source: BoxError,
    },
    #[error("integration failed at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<SimError>,
    },
}

/// Plant description `ẋ = f(x) + g(x)u + d(x)` with per-component actuator
/// bounds. When `disturbance` is `None` the model is the nominal system.
#[derive(Clone)]
pub struct ControlAffineModel {
    state_dim: usize,
    input_dim: usize,
    drift: VectorField,
    input_gain: GainField,
    disturbance: Option<VectorField>,
    u_low: DVector<f64>,
    u_high: DVector<f64>,
    projection: Option<Projection>,
}

impl fmt::Debug for ControlAffineModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineModel")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("disturbed", &self.disturbance.is_some())
            .field("u_low", &self.u_low.as_slice())
            .field("u_high", &self.u_high.as_slice())
            .finish()
    }
}

impl ControlAffineModel {
    pub fn new(
        state_dim: usize,
        input_dim: usize,
        drift: VectorField,
        input_gain: GainField,
        u_low: DVector<f64>,
        u_high: DVector<f64>,
    ) -> Result<Self, SimError> {
        if state_dim == 0 || input_dim == 0 {
            return Err(SimError::InvalidModel("dimensions must be positive".into()));
        }
        check_len("u_low", u_low.len(), input_dim)?;
        check_len("u_high", u_high.len(), input_dim)?;
        if let Some(i) = (0..input_dim).find(|&i| !(u_low[i] < u_high[i])) {
            return Err(SimError::InvalidModel(format!(
                "u_low[{i}]={} must be below u_high[{i}]={}",
                u_low[i], u_high[i]
            )));
        }
        Ok(Self {
            state_dim,
            input_dim,
            drift,
            input_gain,
            disturbance: None,
            u_low,
            u_high,
            projection: None,
        })
    }

    /// Post-step projection applied after every RK4 step (e.g. quaternion
    /// renormalization).
    pub fn with_projection(mut self, projection: Projection) -> Self {
        self.projection = Some(projection);
        self
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn u_low(&self) -> &DVector<f64> {
        &self.u_low
    }

    pub fn u_high(&self) -> &DVector<f64> {
        &self.u_high
    }

    pub fn is_nominal(&self) -> bool {
        self.disturbance.is_none()
    }

    /// The same plant with the disturbance removed.
    pub fn nominal(&self) -> Self {
        Self {
            disturbance: None,
            ..self.clone()
        }
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }

    pub fn input_gain(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.input_gain)(x)
    }

    pub fn disturbance(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.disturbance.as_ref().map(|d| d(x))
    }

    /// `f(x) + g(x)u`, ignoring any disturbance.
    pub fn nominal_derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.input_gain(x) * u
    }

    /// `f(x) + g(x)u + d(x)`.
    pub fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut dx = self.nominal_derivative(x, u);
        if let Some(d) = &self.disturbance {
            dx += d(x);
        }
        dx
    }

    pub fn clamp_input(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            u.len(),
            u.iter()
                .zip(self.u_low.iter().zip(self.u_high.iter()))
                .map(|(&v, (&lo, &hi))| v.clamp(lo, hi)),
        )
    }

    pub fn project(&self, x: &mut DVector<f64>) {
        if let Some(p) = &self.projection {
            p(x);
        }
    }

    /// Returns a copy whose simulated dynamics include `spec`. The nominal
    /// parts `f` and `g` are left untouched so filters built on
    /// [`ControlAffineModel::nominal`] still see the undisturbed plant.
    pub fn with_disturbance(&self, spec: &DisturbanceSpec) -> Result<Self, SimError> {
        let disturbance: VectorField = match spec {
            DisturbanceSpec::AdditiveConstant(c) => {
                check_len("additive disturbance", c.len(), self.state_dim)?;
                let c = c.clone();
                Arc::new(move |_x: &DVector<f64>| c.clone())
            }
            DisturbanceSpec::DriftScaling(rho) => {
                let rho = *rho;
                let drift = self.drift.clone();
                Arc::new(move |x: &DVector<f64>| drift(x) * rho)
            }
            DisturbanceSpec::InputBias(b) => {
                check_len("input bias", b.len(), self.input_dim)?;
                let b = b.clone();
                let gain = self.input_gain.clone();
                Arc::new(move |x: &DVector<f64>| gain(x) * &b)
            }
        };
        Ok(Self {
            disturbance: Some(disturbance),
            ..self.clone()
        })
    }
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), SimError> {
    if got != expected {
        return Err(SimError::Dimension { what, got, expected });
    }
    Ok(())
}

/// Unmodeled dynamics injected into the simulated plant.
#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceSpec {
    /// `ẋ += c`
    AdditiveConstant(DVector<f64>),
    /// `f` becomes `(1 + ρ)·f`
    DriftScaling(f64),
    /// `g·u` becomes `g·(u + b)`
    InputBias(DVector<f64>),
}

/// Plant state paired with its tracking error.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedState {
    pub x: DVector<f64>,
    pub e: DVector<f64>,
    pub t: f64,
}

/// Maps plant states to tracking errors and running costs.
pub trait Task {
    fn error_state(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Jacobian `∂e/∂x`, used to map `ẋ` into error rates.
    fn error_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;

    fn extended(&self, x: &DVector<f64>, t: f64) -> ExtendedState {
        ExtendedState {
            x: x.clone(),
            e: self.error_state(x),
            t,
        }
    }
}

/// Regulation to the origin with `e = x` and cost `‖x‖²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Regulation;

impl Task for Regulation {
    fn error_state(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn error_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(x.len(), x.len())
    }

    fn running_cost(&self, x: &DVector<f64>, _u: &DVector<f64>) -> f64 {
        x.norm_squared()
    }
}

/// Per-step filter diagnostics recorded alongside the trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepDiagnostics {
    pub v: f64,
    pub eta: f64,
    pub k_eta: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub u: DVector<f64>,
    pub diagnostics: StepDiagnostics,
}

impl From<DVector<f64>> for ControlOutput {
    fn from(u: DVector<f64>) -> Self {
        Self {
            u,
            diagnostics: StepDiagnostics::default(),
        }
    }
}

pub trait Controller {
    fn control(&mut self, state: &ExtendedState) -> Result<ControlOutput, BoxError>;
}

impl<F> Controller for F
where
    F: FnMut(&ExtendedState) -> Result<ControlOutput, BoxError>,
{
    fn control(&mut self, state: &ExtendedState) -> Result<ControlOutput, BoxError> {
        self(state)
    }
}

/// One classical RK4 step of the full (possibly disturbed) dynamics with `u`
/// held over the step. The model's projection is applied to the result.
pub fn rk4_step(
    model: &ControlAffineModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>, SimError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(SimError::InvalidStep(dt));
    }
    check_len("state", x.len(), model.state_dim)?;
    check_len("input", u.len(), model.input_dim)?;

    let eval = |y: &DVector<f64>, stage: usize| -> Result<DVector<f64>, SimError> {
        let dy = model.derivative(y, u);
        match dy.iter().position(|v| !v.is_finite()) {
            Some(component) => Err(SimError::NonFinite { component, stage }),
            None => Ok(dy),
        }
    };

    let k1 = eval(x, 1)?;
    let k2 = eval(&(x + &k1 * (0.5 * dt)), 2)?;
    let k3 = eval(&(x + &k2 * (0.5 * dt)), 3)?;
    let k4 = eval(&(x + &k3 * dt), 4)?;
    let mut next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    model.project(&mut next);
    if let Some(component) = next.iter().position(|v| !v.is_finite()) {
        return Err(SimError::NonFinite { component, stage: 5 });
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: DVector<f64>,
    pub e: DVector<f64>,
    pub u: DVector<f64>,
    /// Cost accumulated up to `t` (left rectangle rule).
    pub running_cost: f64,
    pub diagnostics: StepDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub samples: Vec<Sample>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn final_state(&self) -> Option<&DVector<f64>> {
        self.samples.last().map(|s| &s.x)
    }

    pub fn total_cost(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.running_cost)
    }

    /// `Σ‖u(t) − u(t−Δt)‖₁` over the applied inputs.
    pub fn total_variation(&self) -> f64 {
        self.samples.windows(2).map(|w| (&w[1].u - &w[0].u).abs().sum()).sum()
    }

    pub fn max_slack(&self) -> f64 {
        self.samples.iter().map(|s| s.diagnostics.eps).fold(0.0, f64::max)
    }

    /// CSV with header `t,x0..,e0..,u0..,cost,V,eta,k_eta,eps`, values at 9
    /// significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let Some(first) = self.samples.first() else {
            return Ok(());
        };
        let mut header = vec!["t".to_string()];
        header.extend((0..first.x.len()).map(|i| format!("x{i}")));
        header.extend((0..first.e.len()).map(|i| format!("e{i}")));
        header.extend((0..first.u.len()).map(|i| format!("u{i}")));
        header.extend(["cost", "V", "eta", "k_eta", "eps"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        for s in &self.samples {
            let mut row = vec![fmt_sig(s.t)];
            row.extend(s.x.iter().map(|&v| fmt_sig(v)));
            row.extend(s.e.iter().map(|&v| fmt_sig(v)));
            row.extend(s.u.iter().map(|&v| fmt_sig(v)));
            let d = s.diagnostics;
            row.extend([s.running_cost, d.v, d.eta, d.k_eta, d.eps].map(fmt_sig));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Formats `v` with 9 significant digits.
pub fn fmt_sig(v: f64) -> String {
    format!("{v:.8e}")
}

/// Simulates `model` under `controller` for `⌊horizon/dt⌋` steps.
///
/// Inputs are clamped to the actuator bounds before integration; the last
/// sample repeats the final applied input.
pub fn rollout<C: Controller + ?Sized>(
    model: &ControlAffineModel,
    task: &dyn Task,
    controller: &mut C,
    x0: &DVector<f64>,
    horizon: f64,
    dt: f64,
) -> Result<Trajectory, SimError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(SimError::InvalidStep(dt));
    }
    if !(horizon >= dt) {
        return Err(SimError::InvalidHorizon { horizon, dt });
    }
    check_len("initial state", x0.len(), model.state_dim)?;
    let steps = step_count(horizon, dt);

    let mut samples = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    let mut cost = 0.0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let xe = task.extended(&x, t);
        let out = controller
            .control(&xe)
            .map_err(|source| SimError::Controller { step: k, source })?;
        check_len("controller output", out.u.len(), model.input_dim)?;
        let u = model.clamp_input(&out.u);
        let next = rk4_step(model, &x, &u, dt).map_err(|e| SimError::Step {
            step: k,
            source: Box::new(e),
        })?;
        let step_cost = task.running_cost(&x, &u) * dt;
        samples.push(Sample {
            t,
            x,
            e: xe.e,
            u,
            running_cost: cost,
            diagnostics: out.diagnostics,
        });
        cost += step_cost;
        x = next;
    }
    let last = samples.last().expect("at least one step");
    let (u, diagnostics) = (last.u.clone(), last.diagnostics);
    samples.push(Sample {
        t: steps as f64 * dt,
        e: task.error_state(&x),
        x,
        u,
        running_cost: cost,
        diagnostics,
    });
    Ok(Trajectory { dt, samples })
}

/// `⌊horizon/dt⌋`, tolerant of representation error in the ratio.
pub fn step_count(horizon: f64, dt: f64) -> usize {
    (horizon / dt + 1e-9).floor() as usize
}
