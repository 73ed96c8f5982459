//! The SAC-CLF loop: policy proposes, filter corrects, plant integrates the
//! corrected input, and the agent learns from what was actually applied.

use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use sacclf_core::filter::FilterError;
use sacclf_core::sim::{fmt_sig, rk4_step, step_count, ControlAffineModel, Sample, StepDiagnostics, Task, Trajectory};
use sacclf_core::{DisturbanceSpec, Environment, FilterConfig, QuadraticClf, SafetyFilter, SimError};

use crate::agent::{SacAgent, SacError, SacParams};
use crate::policy::{ActionMode, GaussianPolicy};
use crate::replay::{ReplayBuffer, Transition};

/// Slack above this counts as a constraint violation.
pub const EPS_VIOLATION: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Everything that defines one closed loop.
#[derive(Debug, Clone)]
pub struct LoopSpec {
    pub env: Environment,
    pub clf: QuadraticClf,
    pub filter: FilterConfig,
    /// Unmodeled dynamics in the simulated plant; the filter never sees it.
    pub disturbance: Option<DisturbanceSpec>,
}

impl LoopSpec {
    pub fn new(env: Environment, clf: QuadraticClf, filter: FilterConfig) -> Self {
        Self {
            env,
            clf,
            filter,
            disturbance: None,
        }
    }

    pub fn with_disturbance(mut self, d: Option<DisturbanceSpec>) -> Self {
        self.disturbance = d;
        self
    }

    fn plant(&self) -> Result<ControlAffineModel, TrainError> {
        let nominal = self.env.model();
        Ok(match &self.disturbance {
            Some(d) => nominal.with_disturbance(d)?,
            None => nominal,
        })
    }

    fn safety_filter(&self) -> Result<SafetyFilter<Environment>, TrainError> {
        if self.clf.dim() != self.env.error_dim() {
            return Err(TrainError::Dimension(format!(
                "CLF is {}-dimensional but {} errors are {}-dimensional",
                self.clf.dim(),
                self.env.name(),
                self.env.error_dim()
            )));
        }
        Ok(SafetyFilter::new(
            self.clf.clone(),
            self.env.model(),
            self.env.clone(),
            self.filter.clone(),
            self.env.dt(),
        )?)
    }
}

/// One row of a learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// Undiscounted `∫ step_cost dt` over the episode.
    pub cost: f64,
    /// `∫ ‖u‖² dt`, for effort-augmented cost reporting.
    pub effort: f64,
    pub eps_violations: usize,
    pub mean_eta: f64,
    pub final_k_eta: f64,
    /// `Σ ‖u_{k+1} − u_k‖₁`.
    pub total_variation: f64,
    pub steps: usize,
    pub terminated: bool,
}

/// Per-step record kept when step logging is requested.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub episode: usize,
    pub v: f64,
    pub v_next: f64,
    pub eta: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KEtaMemory {
    /// k_η carries over between episodes; the plant bias it tracks persists.
    Persistent,
    PerEpisode,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub episodes: usize,
    pub seed: u64,
    pub log_steps: bool,
    pub k_eta_memory: KEtaMemory,
}

impl TrainOptions {
    pub fn new(episodes: usize, seed: u64) -> Self {
        Self {
            episodes,
            seed,
            log_steps: false,
            k_eta_memory: KEtaMemory::Persistent,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: SacAgent,
    pub curve: Vec<EpisodeRecord>,
    pub steps: Vec<StepLog>,
    /// Trajectory of the last episode.
    pub last_trajectory: Option<Trajectory>,
}

/// Independent streams: initial states are shared across arms run with the
/// same seed regardless of how many random draws the agent makes.
pub fn seeded_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
    env_rng.set_stream(0);
    let mut agent_rng = ChaCha8Rng::seed_from_u64(seed);
    agent_rng.set_stream(1);
    (env_rng, agent_rng)
}

fn start_episode(filter: &mut SafetyFilter<Environment>, memory: KEtaMemory) {
    let k_eta = filter.state.k_eta;
    filter.reset();
    if memory == KEtaMemory::Persistent {
        filter.state.k_eta = k_eta;
    }
}

struct EpisodeAccumulator {
    cost: f64,
    effort: f64,
    eps_violations: usize,
    eta_sum: f64,
    tv: f64,
    steps: usize,
    u_last: Option<DVector<f64>>,
    samples: Vec<Sample>,
}

impl EpisodeAccumulator {
    fn new() -> Self {
        Self {
            cost: 0.0,
            effort: 0.0,
            eps_violations: 0,
            eta_sum: 0.0,
            tv: 0.0,
            steps: 0,
            u_last: None,
            samples: Vec::new(),
        }
    }

    fn record(&mut self, env: &Environment, t: f64, x: &DVector<f64>, u: &DVector<f64>, diag: StepDiagnostics) {
        let running_cost = self.cost;
        self.cost += env.step_cost(x) * env.dt();
        self.effort += u.norm_squared() * env.dt();
        if diag.eps > EPS_VIOLATION {
            self.eps_violations += 1;
        }
        self.eta_sum += diag.eta;
        if let Some(prev) = &self.u_last {
            self.tv += (u - prev).lp_norm(1);
        }
        self.u_last = Some(u.clone());
        self.steps += 1;
        self.samples.push(Sample {
            t,
            x: x.clone(),
            e: env.error_state(x),
            u: u.clone(),
            running_cost,
            diagnostics: diag,
        });
    }

    /// Closes the episode at state `x`; the final sample repeats the last input.
    fn finish(
        mut self,
        env: &Environment,
        x: &DVector<f64>,
        episode: usize,
        k_eta: f64,
        terminated: bool,
    ) -> (EpisodeRecord, Trajectory) {
        if let Some(last) = self.samples.last() {
            let (u, diagnostics, t) = (last.u.clone(), last.diagnostics, last.t + env.dt());
            self.samples.push(Sample {
                t,
                x: x.clone(),
                e: env.error_state(x),
                u,
                running_cost: self.cost,
                diagnostics,
            });
        }
        let record = EpisodeRecord {
            episode,
            cost: self.cost,
            effort: self.effort,
            eps_violations: self.eps_violations,
            mean_eta: if self.steps > 0 {
                self.eta_sum / self.steps as f64
            } else {
                0.0
            },
            final_k_eta: k_eta,
            total_variation: self.tv,
            steps: self.steps,
            terminated,
        };
        (
            record,
            Trajectory {
                dt: env.dt(),
                samples: self.samples,
            },
        )
    }
}

fn uniform_action<R: Rng + ?Sized>(model: &ControlAffineModel, rng: &mut R) -> DVector<f64> {
    let (lo, hi) = (model.u_low(), model.u_high());
    DVector::from_fn(lo.len(), |i, _| rng.gen_range(lo[i]..hi[i]))
}

/// Trains a fresh agent for `opts.episodes` episodes.
pub fn train(spec: &LoopSpec, params: &SacParams, opts: &TrainOptions) -> Result<TrainOutcome, TrainError> {
    let env = &spec.env;
    let plant = spec.plant()?;
    let mut filter = spec.safety_filter()?;
    let (mut env_rng, mut rng) = seeded_rngs(opts.seed);
    let nominal = env.model();
    let mut agent = SacAgent::new(
        env.state_dim(),
        nominal.u_low().clone(),
        nominal.u_high().clone(),
        params.clone(),
        &mut rng,
    )?;
    let mut buffer = ReplayBuffer::new(params.buffer_capacity);
    let dt = env.dt();
    let n_steps = step_count(env.horizon(), dt);
    let mut total_steps = 0usize;
    let mut curve = Vec::with_capacity(opts.episodes);
    let mut logs = Vec::new();
    let mut last_trajectory = None;

    for episode in 0..opts.episodes {
        let mut x = env.sample_initial_state(&mut env_rng);
        start_episode(&mut filter, opts.k_eta_memory);
        let mut acc = EpisodeAccumulator::new();
        let mut terminated = false;
        for k in 0..n_steps {
            let t = k as f64 * dt;
            let obs = env.observation(&x);
            let u_rl = if total_steps < params.warmup_steps {
                uniform_action(&nominal, &mut rng)
            } else {
                agent.policy.act(&obs, ActionMode::Stochastic, &mut rng).0
            };
            let (u, diag) = filter.filter(&env.extended(&x, t), &u_rl)?;
            let x_next = rk4_step(&plant, &x, &u, dt)?;
            acc.record(env, t, &x, &u, (&diag).into());
            let done = env.is_terminal(&x_next);
            let reward = -(env.step_cost(&x) + params.effort_weight * u.norm_squared()) * dt;
            if opts.log_steps {
                let v_next = spec.clf.value(&env.error_state(&x_next));
                logs.push(StepLog {
                    episode,
                    v: diag.v,
                    v_next,
                    eta: diag.eta,
                    eps: diag.eps,
                });
            }
            buffer.push(Transition {
                obs,
                action: u,
                reward,
                next_obs: env.observation(&x_next),
                done,
            });
            total_steps += 1;
            if total_steps >= params.warmup_steps && buffer.len() >= params.batch_size {
                for _ in 0..params.updates_per_step {
                    let batch = buffer.sample(params.batch_size, &mut rng);
                    agent.update(&batch, &mut rng)?;
                }
            }
            x = x_next;
            if done {
                terminated = true;
                break;
            }
        }
        let (record, traj) = acc.finish(env, &x, episode, filter.state.k_eta, terminated);
        curve.push(record);
        if episode + 1 == opts.episodes {
            last_trajectory = Some(traj);
        }
    }
    Ok(TrainOutcome {
        agent,
        curve,
        steps: logs,
        last_trajectory,
    })
}

/// Where the pre-filter action comes from during evaluation.
#[derive(Debug, Clone)]
pub enum ActionSource<'a> {
    Policy(&'a GaussianPolicy, ActionMode),
    Zero,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub records: Vec<EpisodeRecord>,
    pub trajectories: Vec<Trajectory>,
}

/// Replays a frozen action source through the filter for `episodes`
/// consecutive episodes without learning.
pub fn evaluate(
    spec: &LoopSpec,
    source: &ActionSource<'_>,
    episodes: usize,
    seed: u64,
    memory: KEtaMemory,
) -> Result<Evaluation, TrainError> {
    let env = &spec.env;
    let plant = spec.plant()?;
    let mut filter = spec.safety_filter()?;
    let (mut env_rng, mut rng) = seeded_rngs(seed);
    let dt = env.dt();
    let n_steps = step_count(env.horizon(), dt);
    let mut records = Vec::with_capacity(episodes);
    let mut trajectories = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        let x0 = env.sample_initial_state(&mut env_rng);
        let (record, traj) = evaluate_episode(
            spec,
            &plant,
            &mut filter,
            source,
            &x0,
            n_steps,
            episode,
            memory,
            &mut rng,
        )?;
        records.push(record);
        trajectories.push(traj);
    }
    Ok(Evaluation { records, trajectories })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_episode<R: Rng + ?Sized>(
    spec: &LoopSpec,
    plant: &ControlAffineModel,
    filter: &mut SafetyFilter<Environment>,
    source: &ActionSource<'_>,
    x0: &DVector<f64>,
    n_steps: usize,
    episode: usize,
    memory: KEtaMemory,
    rng: &mut R,
) -> Result<(EpisodeRecord, Trajectory), TrainError> {
    let env = &spec.env;
    let dt = env.dt();
    start_episode(filter, memory);
    let mut acc = EpisodeAccumulator::new();
    let mut terminated = false;
    let mut x = x0.clone();
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let u_rl = match source {
            ActionSource::Policy(p, mode) => p.act(&env.observation(&x), *mode, rng).0,
            ActionSource::Zero => DVector::zeros(env.input_dim()),
        };
        let (u, diag) = filter.filter(&env.extended(&x, t), &u_rl)?;
        acc.record(env, t, &x, &u, (&diag).into());
        x = rk4_step(plant, &x, &u, dt)?;
        if env.is_terminal(&x) {
            terminated = true;
            break;
        }
    }
    Ok(acc.finish(env, &x, episode, filter.state.k_eta, terminated))
}

/// Learning curve as `episode,cost,eps_violations,mean_eta`.
pub fn write_curve_csv<W: Write>(curve: &[EpisodeRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "episode,cost,eps_violations,mean_eta")?;
    for r in curve {
        writeln!(
            out,
            "{},{},{},{}",
            r.episode,
            fmt_sig(r.cost),
            r.eps_violations,
            fmt_sig(r.mean_eta)
        )?;
    }
    Ok(())
}

/// Mean cost of the last and first `frac` of a curve, as `(first, last)`.
pub fn decile_costs(curve: &[EpisodeRecord], frac: f64) -> Option<(f64, f64)> {
    let n = ((curve.len() as f64 * frac).round() as usize).max(1);
    if curve.len() < 2 * n {
        return None;
    }
    let mean = |rs: &[EpisodeRecord]| rs.iter().map(|r| r.cost).sum::<f64>() / rs.len() as f64;
    Some((mean(&curve[..n]), mean(&curve[curve.len() - n..])))
}
