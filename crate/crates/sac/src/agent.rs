//! Soft Actor-Critic: twin critics with Polyak targets, a squashed-Gaussian
//! actor and a learned temperature.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mlp::{Adam, Mlp, MlpError, MlpGrads};
use crate::policy::{GaussianPolicy, PolicySample};
use crate::replay::Batch;

#[derive(Debug, Error)]
pub enum SacError {
    #[error("invalid SAC parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacParams {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub initial_alpha: f64,
    /// Defaults to `−dim(u)` when absent.
    pub target_entropy: Option<f64>,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    /// Uniformly random actions before learning starts.
    pub warmup_steps: usize,
    pub updates_per_step: usize,
    /// Weight `R` of the `uᵀRu` term in the reward.
    pub effort_weight: f64,
}

impl Default for SacParams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            initial_alpha: 1.0,
            target_entropy: None,
            batch_size: 64,
            hidden: vec![64, 64],
            buffer_capacity: 200_000,
            warmup_steps: 1000,
            updates_per_step: 1,
            effort_weight: 0.01,
        }
    }
}

impl SacParams {
    pub fn validate(&self) -> Result<(), SacError> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(SacError::Param(msg.to_string()))
            }
        };
        check(self.gamma > 0.0 && self.gamma < 1.0, "gamma must lie in (0, 1)")?;
        check(self.tau > 0.0 && self.tau <= 1.0, "tau must lie in (0, 1]")?;
        check(
            self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.alpha_lr > 0.0,
            "learning rates must be positive",
        )?;
        check(self.initial_alpha > 0.0, "initial_alpha must be positive")?;
        check(self.batch_size > 0, "batch_size must be positive")?;
        check(
            !self.hidden.is_empty() && self.hidden.iter().all(|&h| h > 0),
            "hidden sizes must be positive",
        )?;
        check(
            self.buffer_capacity >= self.batch_size,
            "buffer must hold at least one batch",
        )?;
        check(self.updates_per_step > 0, "updates_per_step must be positive")?;
        check(self.effort_weight >= 0.0, "effort_weight must be non-negative")
    }
}

/// Losses from one full update, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SacAgent {
    pub params: SacParams,
    pub policy: GaussianPolicy,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub log_alpha: f64,
    actor_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    alpha_opt: Adam,
}

/// Stacks observations on top of normalized actions.
pub fn critic_input(obs: &DMatrix<f64>, action_norm: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (obs.nrows(), action_norm.nrows());
    DMatrix::from_fn(n + m, obs.ncols(), |r, c| {
        if r < n {
            obs[(r, c)]
        } else {
            action_norm[(r - n, c)]
        }
    })
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        u_low: DVector<f64>,
        u_high: DVector<f64>,
        params: SacParams,
        rng: &mut R,
    ) -> Result<Self, SacError> {
        params.validate()?;
        let m = u_low.len();
        let policy = GaussianPolicy::new(obs_dim, &params.hidden, u_low, u_high, rng);
        let mut sizes = vec![obs_dim + m];
        sizes.extend_from_slice(&params.hidden);
        sizes.push(1);
        let q1 = Mlp::new(&sizes, rng);
        let q2 = Mlp::new(&sizes, rng);
        Ok(Self {
            actor_opt: Adam::new(policy.net.num_params(), params.actor_lr),
            q1_opt: Adam::new(q1.num_params(), params.critic_lr),
            q2_opt: Adam::new(q2.num_params(), params.critic_lr),
            alpha_opt: Adam::new(1, params.alpha_lr),
            log_alpha: params.initial_alpha.ln(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            policy,
            params,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.params.target_entropy.unwrap_or(-(self.policy.action_dim() as f64))
    }

    /// Soft Bellman targets `r + γ(1−d)(min Q̄(s', a') − α log π(a'|s'))`.
    pub fn td_targets<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> DVector<f64> {
        let next = self.policy.sample_batch(&batch.next_obs, rng);
        let input = critic_input(&batch.next_obs, &next.squashed);
        let t1 = self.q1_target.forward(&input);
        let t2 = self.q2_target.forward(&input);
        let alpha = self.alpha();
        DVector::from_fn(batch.reward.len(), |b, _| {
            let soft_v = t1[(0, b)].min(t2[(0, b)]) - alpha * next.log_prob[b];
            batch.reward[b] + self.params.gamma * (1.0 - batch.done[b]) * soft_v
        })
    }

    /// Mean-squared Bellman errors of both critics against fixed targets,
    /// with their parameter gradients.
    pub fn critic_gradients(&self, batch: &Batch, targets: &DVector<f64>) -> ([f64; 2], [MlpGrads; 2]) {
        let input = critic_input(&batch.obs, &self.policy.normalize(&batch.action));
        let n = targets.len() as f64;
        let grad = |net: &Mlp| {
            let (pred, cache) = net.forward_cached(&input);
            let err = DMatrix::from_fn(1, targets.len(), |_, b| pred[(0, b)] - targets[b]);
            let loss = err.norm_squared() / n;
            (loss, net.backward(&cache, &(err * (2.0 / n))).0)
        };
        let (l1, g1) = grad(&self.q1);
        let (l2, g2) = grad(&self.q2);
        ([l1, l2], [g1, g2])
    }

    /// One gradient step on both critics; returns the mean of their MSEs.
    pub fn critic_update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> f64 {
        let y = self.td_targets(batch, rng);
        let (losses, [g1, g2]) = self.critic_gradients(batch, &y);
        self.q1_opt.step_mlp(&mut self.q1, &g1);
        self.q2_opt.step_mlp(&mut self.q2, &g2);
        0.5 * (losses[0] + losses[1])
    }

    /// Twin-critic value `min(Q₁, Q₂)` and its gradient with respect to the
    /// normalized action, per batch column.
    pub fn min_q_with_grad(&self, obs: &DMatrix<f64>, squashed: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let input = critic_input(obs, squashed);
        let (v1, c1) = self.q1.forward_cached(&input);
        let (v2, c2) = self.q2.forward_cached(&input);
        let batch = obs.ncols();
        let mut g1 = DMatrix::zeros(1, batch);
        let mut g2 = DMatrix::zeros(1, batch);
        let q = DVector::from_fn(batch, |b, _| {
            if v1[(0, b)] <= v2[(0, b)] {
                g1[(0, b)] = 1.0;
                v1[(0, b)]
            } else {
                g2[(0, b)] = 1.0;
                v2[(0, b)]
            }
        });
        let (_, gi1) = self.q1.backward(&c1, &g1);
        let (_, gi2) = self.q2.backward(&c2, &g2);
        let n = obs.nrows();
        let grad = (gi1 + gi2).rows(n, squashed.nrows()).into_owned();
        (q, grad)
    }

    /// One gradient step on `E[α log π(a|s) − min Q(s, a)]`; returns the
    /// loss and the batch log-probabilities before the step.
    pub fn actor_update<R: Rng + ?Sized>(&mut self, obs: &DMatrix<f64>, rng: &mut R) -> (f64, DVector<f64>) {
        let sample = self.policy.sample_batch(obs, rng);
        let (q, dq) = self.min_q_with_grad(obs, &sample.squashed);
        self.actor_step(&sample, &q, &dq)
    }

    /// Actor loss `mean(α log π − Q)` and its policy gradient, given critic
    /// values `q` and their gradients `dq` with respect to the normalized
    /// sampled actions.
    pub fn actor_gradients(&self, sample: &PolicySample, q: &DVector<f64>, dq: &DMatrix<f64>) -> (f64, MlpGrads) {
        let batch = q.len();
        let n = batch as f64;
        let alpha = self.alpha();
        let loss = (alpha * sample.log_prob.sum() - q.sum()) / n;
        // Critics see normalized actions; chain through u = mid + half·s.
        let grad_u = DMatrix::from_fn(self.policy.action_dim(), batch, |j, b| {
            let half = 0.5 * (self.policy.u_high()[j] - self.policy.u_low()[j]);
            -dq[(j, b)] / (n * half)
        });
        let grad_lp = DVector::from_element(batch, alpha / n);
        (loss, self.policy.backward(sample, &grad_u, &grad_lp))
    }

    /// Actor step against an arbitrary differentiable critic.
    pub fn actor_step(&mut self, sample: &PolicySample, q: &DVector<f64>, dq: &DMatrix<f64>) -> (f64, DVector<f64>) {
        let (loss, grads) = self.actor_gradients(sample, q, dq);
        self.actor_opt.step_mlp(&mut self.policy.net, &grads);
        (loss, sample.log_prob.clone())
    }

    /// Gradient of `E[α(−log π − H̄)]` with respect to `log α`.
    pub fn temperature_gradient(&self, log_prob: &DVector<f64>) -> f64 {
        let h_bar = self.target_entropy();
        self.alpha() * log_prob.iter().map(|lp| -lp - h_bar).sum::<f64>() / log_prob.len() as f64
    }

    pub fn temperature_update(&mut self, log_prob: &DVector<f64>) {
        let g = self.temperature_gradient(log_prob);
        let mut p = [self.log_alpha];
        self.alpha_opt.step(&mut p, &[g]);
        self.log_alpha = p[0];
    }

    pub fn soft_update_targets(&mut self) -> Result<(), SacError> {
        self.q1_target.soft_update(&self.q1, self.params.tau)?;
        self.q2_target.soft_update(&self.q2, self.params.tau)?;
        Ok(())
    }

    /// Critic step, actor step, temperature step, then target tracking.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<UpdateStats, SacError> {
        let critic_loss = self.critic_update(batch, rng);
        let (actor_loss, log_prob) = self.actor_update(&batch.obs, rng);
        self.temperature_update(&log_prob);
        self.soft_update_targets()?;
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
            alpha: self.alpha(),
            entropy: -log_prob.mean(),
        })
    }

    pub fn to_json(&self) -> Result<String, SacError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, SacError> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn agent(seed: u64) -> SacAgent {
        let params = SacParams {
            hidden: vec![8, 8],
            ..SacParams::default()
        };
        SacAgent::new(
            2,
            DVector::from_element(1, -10.0),
            DVector::from_element(1, 10.0),
            params,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize) -> Batch {
        Batch {
            obs: DMatrix::from_fn(2, n, |_, _| rng.gen_range(-1.0..1.0)),
            action: DMatrix::from_fn(1, n, |_, _| rng.gen_range(-10.0..10.0)),
            reward: DVector::from_fn(n, |_, _| rng.gen_range(-0.1..0.0)),
            next_obs: DMatrix::from_fn(2, n, |_, _| rng.gen_range(-1.0..1.0)),
            done: DVector::zeros(n),
        }
    }

    #[test]
    fn critic_regresses_to_fixed_targets() {
        // With γ tiny the target is essentially the reward.
        let mut a = agent(1);
        a.params.gamma = 1e-9;
        a.q1_opt.lr = 3e-3;
        a.q2_opt.lr = 3e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = batch(&mut rng, 32);
        let first = a.critic_update(&b, &mut rng);
        let mut last = first;
        for _ in 0..500 {
            last = a.critic_update(&b, &mut rng);
        }
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn entropy_at_target_leaves_alpha_unchanged() {
        let mut a = agent(3);
        let before = a.log_alpha;
        let lp = DVector::from_element(5, -a.target_entropy());
        assert_eq!(a.temperature_gradient(&lp), 0.0);
        a.temperature_update(&lp);
        assert_eq!(a.log_alpha, before);
    }

    #[test]
    fn excess_entropy_lowers_alpha() {
        let mut a = agent(4);
        let before = a.log_alpha;
        a.temperature_update(&DVector::from_element(5, -3.0));
        assert!(a.log_alpha < before);
    }

    #[test]
    fn actor_step_raises_q_minus_entropy_objective() {
        let mut a = agent(5);
        a.actor_opt.lr = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let obs = DMatrix::from_fn(2, 256, |_, _| rng.gen_range(-1.0..1.0));
        let eval = |a: &SacAgent| {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            let s = a.policy.sample_batch(&obs, &mut r);
            let input = critic_input(&obs, &s.squashed);
            let q = a.q1.forward(&input).zip_map(&a.q2.forward(&input), f64::min);
            (a.alpha() * s.log_prob.sum() - q.sum()) / obs.ncols() as f64
        };
        let before = eval(&a);
        for _ in 0..50 {
            a.actor_update(&obs, &mut rng);
        }
        assert!(eval(&a) < before);
    }

    #[test]
    fn checkpoint_round_trip_preserves_actions() {
        let a = agent(7);
        let b = SacAgent::from_json(&a.to_json().unwrap()).unwrap();
        let obs = DVector::from_vec(vec![0.3, -0.4]);
        let mode = crate::policy::ActionMode::Deterministic;
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(a.policy.act(&obs, mode, &mut r).0, b.policy.act(&obs, mode, &mut r).0);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = SacParams {
            gamma: 1.0,
            ..SacParams::default()
        };
        assert!(p.validate().is_err());
    }
}
