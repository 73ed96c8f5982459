//! CLF-QP action filter with adaptive constraint strength and input
//! smoothing.
//!
//! Each control step solves
//!
//! ```text
//! min  ‖u − u_rl‖² + β‖u − u_prev‖² + K_ε·ε
//! s.t. ∂V/∂e·[f(x) + g(x)u] ≤ −η(t)·V(e) + ε,   u_low ≤ u ≤ u_high,   ε ≥ 0
//! ```
//!
//! on the nominal model, with `η(t) = η₀(1 + k_η(t))`. The gain `k_η` tracks
//! the mismatch `δ = V̇_desired − V̇_actual` between the nominal prediction
//! and the measured rate of change of `V`. Both rates are averages over the
//! same held-input step, so sampling alone contributes nothing to `δ`:
//!
//! ```text
//! k̇_η = ω_η · (δ / (η₀V + ϵ) − k_η)
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clf::QuadraticClf;
use crate::qp::{solve_qp, ActiveSet, QpError, QpInstance};
use crate::sim::{rk4_step, ControlAffineModel, ExtendedState, SimError, StepDiagnostics, Task};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid filter config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Baseline decrease rate η₀ (1/s).
    pub eta0: f64,
    /// Adaptation speed ω_η (1/s); zero freezes k_η.
    pub omega_eta: f64,
    /// Division guard ϵ in the adaptation law.
    pub epsilon: f64,
    /// Slack penalty K_ε.
    pub k_eps: f64,
    /// Smoothing weight β.
    pub beta: f64,
    /// Safe-energy-ball level V₀, if known.
    pub v0: Option<f64>,
    pub k_eta_min: f64,
    pub k_eta_max: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            eta0: 0.1,
            omega_eta: 0.0,
            epsilon: 1e-3,
            k_eps: 1e8,
            beta: 0.0,
            v0: None,
            k_eta_min: -0.5,
            k_eta_max: 10.0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(FilterError::Config(msg)) };
        check(
            self.eta0 > 0.0 && self.eta0.is_finite(),
            format!("eta0 must be positive, got {}", self.eta0),
        )?;
        check(
            self.omega_eta >= 0.0 && self.omega_eta.is_finite(),
            format!("omega_eta must be non-negative, got {}", self.omega_eta),
        )?;
        check(
            self.epsilon > 0.0,
            format!("epsilon must be positive, got {}", self.epsilon),
        )?;
        check(
            self.k_eps > 0.0 && self.k_eps.is_finite(),
            format!("k_eps must be positive, got {}", self.k_eps),
        )?;
        check(
            self.beta >= 0.0 && self.beta.is_finite(),
            format!("beta must be non-negative, got {}", self.beta),
        )?;
        check(
            self.k_eta_min > -1.0 && self.k_eta_min <= 0.0 && self.k_eta_max >= 0.0,
            format!(
                "k_eta range [{}, {}] must contain 0 and keep η > 0",
                self.k_eta_min, self.k_eta_max
            ),
        )?;
        if let Some(v0) = self.v0 {
            check(v0 > 0.0, format!("v0 must be positive, got {v0}"))?;
        }
        Ok(())
    }

    /// `η = η₀(1 + k_η)`.
    pub fn eta(&self, k_eta: f64) -> f64 {
        self.eta0 * (1.0 + k_eta)
    }
}

/// Per-loop filter memory.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub u_prev: DVector<f64>,
    pub k_eta: f64,
    pub v_prev: Option<f64>,
    /// Nominal `V̇` over the previous step, `(V(x̂_next) − V_prev)/dt` with
    /// `x̂_next` integrated on the nominal model under the held input.
    pub vdot_desired_prev: Option<f64>,
}

impl FilterState {
    pub fn new(input_dim: usize) -> Self {
        Self {
            u_prev: DVector::zeros(input_dim),
            k_eta: 0.0,
            v_prev: None,
            vdot_desired_prev: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterDiagnostics {
    pub v: f64,
    pub eta: f64,
    pub k_eta: f64,
    pub delta: f64,
    pub eps: f64,
    pub active_set: ActiveSet,
    pub kkt_residual: f64,
}

impl From<&FilterDiagnostics> for StepDiagnostics {
    fn from(d: &FilterDiagnostics) -> Self {
        StepDiagnostics {
            v: d.v,
            eta: d.eta,
            k_eta: d.k_eta,
            eps: d.eps,
        }
    }
}

/// Assembles the QP for one control step.
///
/// The objective `(1+β)‖u‖² − 2(u_rl + β·u_prev)ᵀu + K_ε·ε` drops constant
/// terms; the CLF row is `a = gᵀ·(∂e/∂x)ᵀ·2Pe` with
/// `b = −η·V − 2(Pe)ᵀ·(∂e/∂x)·f(x)`.
#[allow(clippy::too_many_arguments)]
pub fn build_qp(
    clf: &QuadraticClf,
    model: &ControlAffineModel,
    task: &dyn Task,
    x: &DVector<f64>,
    e: &DVector<f64>,
    u_rl: &DVector<f64>,
    state: &FilterState,
    cfg: &FilterConfig,
) -> Result<QpInstance, FilterError> {
    let m = model.input_dim();
    if e.len() != clf.dim() || u_rl.len() != m || state.u_prev.len() != m || x.len() != model.state_dim() {
        return Err(FilterError::Dimension(format!(
            "x: {}, e: {} (CLF {}), u_rl: {}, u_prev: {}, model {}-state/{}-input",
            x.len(),
            e.len(),
            clf.dim(),
            u_rl.len(),
            state.u_prev.len(),
            model.state_dim(),
            m
        )));
    }
    let (v, grad) = clf.eval(e);
    let jac = task.error_jacobian(x);
    let grad_x = jac.transpose() * &grad;
    let eta = cfg.eta(state.k_eta);
    Ok(QpInstance {
        h: DMatrix::identity(m, m) * (1.0 + cfg.beta),
        c: u_rl + &state.u_prev * cfg.beta,
        a: model.input_gain(x).transpose() * &grad_x,
        b_rhs: -eta * v - grad_x.dot(&model.drift(x)),
        lower: model.u_low().clone(),
        upper: model.u_high().clone(),
        slack_penalty: cfg.k_eps,
    })
}

/// `δ = V̇_desired − V̇_actual` with `V̇_actual ≈ (V_now − V_prev)/dt`.
/// Zero before the first recorded step.
pub fn measure_delta(state: &FilterState, v_now: f64, dt: f64) -> f64 {
    match (state.v_prev, state.vdot_desired_prev) {
        (Some(v_prev), Some(vdot_desired)) => vdot_desired - (v_now - v_prev) / dt,
        _ => 0.0,
    }
}

/// Forward-Euler step of the k_η law, clamped to `[k_eta_min, k_eta_max]`.
pub fn update_k_eta(k_eta: f64, delta: f64, v: f64, cfg: &FilterConfig, dt: f64) -> f64 {
    let target = delta / (cfg.eta0 * v + cfg.epsilon);
    let next = k_eta + dt * cfg.omega_eta * (target - k_eta);
    next.clamp(cfg.k_eta_min, cfg.k_eta_max)
}

/// One filter step: measure δ, adapt k_η, solve the QP, update memory.
#[allow(clippy::too_many_arguments)]
pub fn filter_action(
    clf: &QuadraticClf,
    model: &ControlAffineModel,
    task: &dyn Task,
    xe: &ExtendedState,
    u_rl: &DVector<f64>,
    state: &mut FilterState,
    cfg: &FilterConfig,
    dt: f64,
) -> Result<(DVector<f64>, FilterDiagnostics), FilterError> {
    let v = clf.value(&xe.e);
    let delta = measure_delta(state, v, dt);
    state.k_eta = update_k_eta(state.k_eta, delta, v, cfg, dt);

    let qp = build_qp(clf, model, task, &xe.x, &xe.e, u_rl, state, cfg)?;
    let sol = solve_qp(&qp)?;

    let x_pred = rk4_step(model, &xe.x, &sol.u, dt)?;
    state.vdot_desired_prev = Some((clf.value(&task.error_state(&x_pred)) - v) / dt);
    state.v_prev = Some(v);
    state.u_prev = sol.u.clone();

    let diagnostics = FilterDiagnostics {
        v,
        eta: cfg.eta(state.k_eta),
        k_eta: state.k_eta,
        delta,
        eps: sol.slack,
        active_set: sol.active_set,
        kkt_residual: sol.kkt_residual,
    };
    Ok((sol.u, diagnostics))
}

/// A filter instance bound to one plant and CLF, owning its memory.
#[derive(Debug, Clone)]
pub struct SafetyFilter<T: Task> {
    pub clf: QuadraticClf,
    /// Nominal model the constraint is built on.
    pub model: ControlAffineModel,
    pub task: T,
    pub config: FilterConfig,
    pub state: FilterState,
    pub dt: f64,
}

impl<T: Task> SafetyFilter<T> {
    pub fn new(
        clf: QuadraticClf,
        model: ControlAffineModel,
        task: T,
        config: FilterConfig,
        dt: f64,
    ) -> Result<Self, FilterError> {
        config.validate()?;
        let state = FilterState::new(model.input_dim());
        Ok(Self {
            clf,
            model: model.nominal(),
            task,
            config,
            state,
            dt,
        })
    }

    pub fn reset(&mut self) {
        self.state = FilterState::new(self.model.input_dim());
    }

    pub fn filter(
        &mut self,
        xe: &ExtendedState,
        u_rl: &DVector<f64>,
    ) -> Result<(DVector<f64>, FilterDiagnostics), FilterError> {
        filter_action(
            &self.clf,
            &self.model,
            &self.task,
            xe,
            u_rl,
            &mut self.state,
            &self.config,
            self.dt,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Environment;
    use crate::qp::ClfStatus;

    fn nct_clf() -> QuadraticClf {
        QuadraticClf::new(DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0])), 0.1).unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn nct_hand_built_row() {
        let env = Environment::nct();
        let x = v(&[0.0, 1.0]);
        let qp = build_qp(
            &nct_clf(),
            &env.model(),
            &env,
            &x,
            &x,
            &v(&[0.0]),
            &FilterState::new(1),
            &FilterConfig::default(),
        )
        .unwrap();
        assert_eq!(qp.a[0], 6.0);
        assert!((qp.b_rhs + 8.1).abs() < 1e-12);
        assert_eq!(qp.h[(0, 0)], 1.0);
    }

    #[test]
    fn target_state_passes_through() {
        let env = Environment::nct();
        let mut state = FilterState::new(1);
        let xe = ExtendedState {
            x: DVector::zeros(2),
            e: DVector::zeros(2),
            t: 0.0,
        };
        let (u, d) = filter_action(
            &nct_clf(),
            &env.model(),
            &env,
            &xe,
            &v(&[0.0]),
            &mut state,
            &FilterConfig::default(),
            0.01,
        )
        .unwrap();
        assert_eq!(u[0], 0.0);
        assert_eq!(d.eps, 0.0);

        let (u, _) = filter_action(
            &nct_clf(),
            &env.model(),
            &env,
            &xe,
            &v(&[3.0]),
            &mut state,
            &FilterConfig::default(),
            0.01,
        )
        .unwrap();
        assert_eq!(u[0], 3.0);
    }

    #[test]
    fn nct_constraint_active_example() {
        let env = Environment::nct();
        let mut state = FilterState::new(1);
        let x = v(&[0.0, 1.0]);
        let xe = ExtendedState {
            x: x.clone(),
            e: x,
            t: 0.0,
        };
        let (u, d) = filter_action(
            &nct_clf(),
            &env.model(),
            &env,
            &xe,
            &v(&[0.0]),
            &mut state,
            &FilterConfig::default(),
            0.01,
        )
        .unwrap();
        assert!((u[0] + 1.35).abs() < 1e-12);
        assert_eq!(d.eps, 0.0);
        assert_eq!(d.active_set.clf, ClfStatus::Tight);
        assert_eq!(state.u_prev, u);
        assert_eq!(state.v_prev, Some(1.0));
        // The instantaneous nominal V̇ sits on the constraint at −0.1; the
        // step average differs from it by O(dt).
        let x_pred = rk4_step(&env.model(), &v(&[0.0, 1.0]), &u, 0.01).unwrap();
        let expect = (nct_clf().value(&x_pred) - 1.0) / 0.01;
        assert!((state.vdot_desired_prev.unwrap() - expect).abs() < 1e-12);
        assert!((expect + 0.1).abs() < 0.2);
    }

    #[test]
    fn delta_arithmetic() {
        let mut state = FilterState::new(1);
        assert_eq!(measure_delta(&state, 0.9, 0.1), 0.0);
        state.v_prev = Some(1.0);
        state.vdot_desired_prev = Some(-1.2);
        assert!((measure_delta(&state, 0.9, 0.1) + 0.2).abs() < 1e-12);
    }

    #[test]
    fn k_eta_decays_without_error() {
        let cfg = FilterConfig {
            omega_eta: 0.01,
            ..Default::default()
        };
        let dt = 1e-3;
        let next = update_k_eta(0.5, 0.0, 1.0, &cfg, dt);
        assert!(((next - 0.5) / dt + 0.005).abs() < 1e-12);
    }

    #[test]
    fn frozen_adaptation() {
        let cfg = FilterConfig::default();
        let mut k = 0.3;
        for _ in 0..1000 {
            k = update_k_eta(k, 5.0, 0.2, &cfg, 0.01);
        }
        assert_eq!(k, 0.3);
    }

    #[test]
    fn k_eta_is_clamped() {
        let cfg = FilterConfig {
            omega_eta: 100.0,
            ..Default::default()
        };
        assert_eq!(update_k_eta(0.0, 1e6, 1.0, &cfg, 1.0), 10.0);
        assert_eq!(update_k_eta(0.0, -1e6, 1.0, &cfg, 1.0), -0.5);
        assert!(cfg.eta(-0.5) > 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig::default().validate().is_ok());
        for bad in [
            FilterConfig {
                eta0: 0.0,
                ..Default::default()
            },
            FilterConfig {
                omega_eta: -1.0,
                ..Default::default()
            },
            FilterConfig {
                epsilon: 0.0,
                ..Default::default()
            },
            FilterConfig {
                k_eps: 0.0,
                ..Default::default()
            },
            FilterConfig {
                beta: -0.1,
                ..Default::default()
            },
            FilterConfig {
                k_eta_min: -1.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn dimension_mismatch_reported() {
        let env = Environment::nct();
        let err = build_qp(
            &nct_clf(),
            &env.model(),
            &env,
            &v(&[0.0, 1.0]),
            &v(&[0.0, 1.0, 2.0]),
            &v(&[0.0]),
            &FilterState::new(1),
            &FilterConfig::default(),
        );
        assert!(matches!(err, Err(FilterError::Dimension(_))));
    }
}
