//! Control-affine plants, quadratic CLF synthesis and the CLF-QP safety
//! filter used to shield reinforcement-learning actions.

pub mod clf;
pub mod env;
pub mod filter;
pub mod qp;
pub mod sim;

pub use clf::{linearize, lqr_clf, solve_are, solve_lyapunov, ClfError, LinearModel, QuadraticClf};
pub use env::{Environment, NctEnv, SatelliteEnv};
pub use filter::{filter_action, FilterConfig, FilterDiagnostics, FilterError, FilterState, SafetyFilter};
pub use qp::{solve_qp, QpInstance, QpSolution};
pub use sim::{
    rk4_step, rollout, ControlAffineModel, ControlOutput, Controller, DisturbanceSpec, ExtendedState, SimError, Task,
    Trajectory,
};
