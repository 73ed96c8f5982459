//! Tanh-squashed Gaussian policy.
//!
//! The network maps an observation to `(μ, log σ)`; an action is
//! `u = mid + half·tanh(μ + σ·ξ)` with `ξ ~ N(0, I)`. Log-probabilities are
//! densities of the normalized action `tanh(z) ∈ (−1, 1)ᵐ`, so the entropy
//! target does not depend on the physical input scale.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::mlp::{Mlp, MlpCache, MlpGrads};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;
// Keeps tanh(z) strictly inside (−1, 1) so actions never touch the bounds.
const SQUASH_LIMIT: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub net: Mlp,
    u_low: DVector<f64>,
    u_high: DVector<f64>,
}

/// Everything produced by a batched reparameterized sample, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct PolicySample {
    /// Physical actions, `m × batch`.
    pub u: DMatrix<f64>,
    /// Normalized actions `tanh(z)`, `m × batch`.
    pub squashed: DMatrix<f64>,
    pub log_prob: DVector<f64>,
    noise: DMatrix<f64>,
    std: DMatrix<f64>,
    log_std_clamped: DMatrix<bool>,
    cache: MlpCache,
}

/// `log(1 − tanh²z)` without cancellation for large |z|.
fn log_one_minus_tanh_sq(z: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - z - softplus(-2.0 * z))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        u_low: DVector<f64>,
        u_high: DVector<f64>,
        rng: &mut R,
    ) -> Self {
        let m = u_low.len();
        assert_eq!(m, u_high.len());
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * m);
        Self {
            net: Mlp::new(&sizes, rng),
            u_low,
            u_high,
        }
    }

    pub fn from_parts(net: Mlp, u_low: DVector<f64>, u_high: DVector<f64>) -> Self {
        Self { net, u_low, u_high }
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.u_low.len()
    }

    pub fn u_low(&self) -> &DVector<f64> {
        &self.u_low
    }

    pub fn u_high(&self) -> &DVector<f64> {
        &self.u_high
    }

    fn mid(&self, j: usize) -> f64 {
        0.5 * (self.u_high[j] + self.u_low[j])
    }

    fn half(&self, j: usize) -> f64 {
        0.5 * (self.u_high[j] - self.u_low[j])
    }

    /// Maps physical actions into `[−1, 1]` per component.
    pub fn normalize(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(u.nrows(), u.ncols(), |j, b| (u[(j, b)] - self.mid(j)) / self.half(j))
    }

    fn denormalize(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(s.nrows(), s.ncols(), |j, b| self.mid(j) + self.half(j) * s[(j, b)])
    }

    /// `(μ, log σ)` for one observation, with log σ clamped.
    pub fn distribution(&self, obs: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let out = self.net.forward_one(obs);
        let m = self.action_dim();
        let mean = out.rows(0, m).into_owned();
        let log_std = out.rows(m, m).map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        (mean, log_std)
    }

    /// Draws one action, returning it with its log-probability. The
    /// deterministic mode returns the squashed mean.
    pub fn act<R: Rng + ?Sized>(&self, obs: &DVector<f64>, mode: ActionMode, rng: &mut R) -> (DVector<f64>, f64) {
        let m = self.action_dim();
        let noise = match mode {
            ActionMode::Stochastic => DMatrix::from_fn(m, 1, |_, _| rng.sample(StandardNormal)),
            ActionMode::Deterministic => DMatrix::zeros(m, 1),
        };
        let obs = DMatrix::from_column_slice(obs.len(), 1, obs.as_slice());
        let s = self.sample_with_noise(&obs, &noise);
        (s.u.column(0).into_owned(), s.log_prob[0])
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, obs: &DMatrix<f64>, rng: &mut R) -> PolicySample {
        let noise = DMatrix::from_fn(self.action_dim(), obs.ncols(), |_, _| rng.sample(StandardNormal));
        self.sample_with_noise(obs, &noise)
    }

    /// Reparameterized sample with caller-supplied standard-normal noise.
    pub fn sample_with_noise(&self, obs: &DMatrix<f64>, noise: &DMatrix<f64>) -> PolicySample {
        let m = self.action_dim();
        let batch = obs.ncols();
        assert_eq!(noise.shape(), (m, batch));
        let (out, cache) = self.net.forward_cached(obs);
        let mut squashed = DMatrix::zeros(m, batch);
        let mut std = DMatrix::zeros(m, batch);
        let mut log_std_clamped = DMatrix::from_element(m, batch, false);
        let mut log_prob = DVector::zeros(batch);
        for b in 0..batch {
            let mut lp = 0.0;
            for j in 0..m {
                let raw = out[(m + j, b)];
                let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
                log_std_clamped[(j, b)] = ls != raw;
                let sd = ls.exp();
                let xi = noise[(j, b)];
                let z = out[(j, b)] + sd * xi;
                squashed[(j, b)] = z.tanh().clamp(-SQUASH_LIMIT, SQUASH_LIMIT);
                std[(j, b)] = sd;
                lp += -0.5 * xi * xi - ls - HALF_LOG_2PI - log_one_minus_tanh_sq(z);
            }
            log_prob[b] = lp;
        }
        PolicySample {
            u: self.denormalize(&squashed),
            squashed,
            log_prob,
            noise: noise.clone(),
            std,
            log_std_clamped,
            cache,
        }
    }

    /// Parameter gradients of a loss `L(u, log π)` through a reparameterized
    /// sample, given `∂L/∂u` (`m × batch`) and `∂L/∂log π` (per sample).
    pub fn backward(&self, sample: &PolicySample, grad_u: &DMatrix<f64>, grad_log_prob: &DVector<f64>) -> MlpGrads {
        let m = self.action_dim();
        let batch = sample.u.ncols();
        let mut grad_out = DMatrix::zeros(2 * m, batch);
        for b in 0..batch {
            for j in 0..m {
                let s = sample.squashed[(j, b)];
                // ∂u/∂z = half·(1 − s²); ∂log π/∂z = 2s from the squash term.
                let gz = grad_u[(j, b)] * self.half(j) * (1.0 - s * s) + grad_log_prob[b] * 2.0 * s;
                grad_out[(j, b)] = gz;
                if !sample.log_std_clamped[(j, b)] {
                    grad_out[(m + j, b)] = gz * sample.std[(j, b)] * sample.noise[(j, b)] - grad_log_prob[b];
                }
            }
        }
        self.net.backward(&sample.cache, &grad_out).0
    }
}
