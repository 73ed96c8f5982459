//! Finite-difference checks of every SAC update path on miniature networks.
//! Each check returns the worst error in units of its tolerance
//! `1e-5·max(|fd|, |analytic|, 1e-3)`, so values ≤ 1 pass.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sacclf_sac::agent::critic_input;
use sacclf_sac::{Batch, Mlp, SacAgent, SacParams};

const H: f64 = 1e-6;

pub fn tolerance_units(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / (1e-5 * fd.abs().max(analytic.abs()).max(1e-3))
}

/// obs 1 + action 1 → 2 → 1 critics, obs 1 → 2 → (μ, log σ) actor.
pub fn mini_agent(seed: u64) -> SacAgent {
    let params = SacParams {
        hidden: vec![2],
        ..SacParams::default()
    };
    let mut a = SacAgent::new(
        1,
        DVector::from_element(1, -2.0),
        DVector::from_element(1, 2.0),
        params,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    a.log_alpha = 0.3f64.ln();
    a
}

fn batch(rng: &mut ChaCha8Rng) -> Batch {
    Batch {
        obs: DMatrix::from_fn(1, 6, |_, _| rng.gen_range(-1.0..1.0)),
        action: DMatrix::from_fn(1, 6, |_, _| rng.gen_range(-1.9..1.9)),
        reward: DVector::from_fn(6, |_, _| rng.gen_range(-1.0..0.0)),
        next_obs: DMatrix::from_fn(1, 6, |_, _| rng.gen_range(-1.0..1.0)),
        done: DVector::zeros(6),
    }
}

fn perturbed(net: &Mlp, i: usize, h: f64) -> Mlp {
    let mut p = net.params();
    p[i] += h;
    let mut out = net.clone();
    out.set_params(&p).unwrap();
    out
}

/// Critic MSE against fixed TD targets, w.r.t. every q1 parameter.
pub fn critic_path(seed: u64) -> f64 {
    let a = mini_agent(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let b = batch(&mut rng);
    let y = a.td_targets(&b, &mut rng);
    let (_, [g1, _]) = a.critic_gradients(&b, &y);
    let analytic = g1.flatten();
    let loss = |net: Mlp| {
        let mut m = a.clone();
        m.q1 = net;
        m.critic_gradients(&b, &y).0[0]
    };
    (0..a.q1.num_params())
        .map(|i| {
            let fd = (loss(perturbed(&a.q1, i, H)) - loss(perturbed(&a.q1, i, -H))) / (2.0 * H);
            tolerance_units(fd, analytic[i])
        })
        .fold(0.0, f64::max)
}

/// Reparameterized actor loss `α·logπ − min Q` through the tanh squash,
/// w.r.t. every policy parameter. Also returns the reported-loss mismatch.
pub fn actor_path(seed: u64) -> (f64, f64) {
    let a = mini_agent(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let obs = DMatrix::from_fn(1, 6, |_, _| rng.gen_range(-1.0..1.0));
    let noise = DMatrix::from_fn(1, 6, |_, _| rng.sample(StandardNormal));
    let loss_of = |agent: &SacAgent| {
        let s = agent.policy.sample_with_noise(&obs, &noise);
        let input = critic_input(&obs, &s.squashed);
        let q = agent.q1.forward(&input).zip_map(&agent.q2.forward(&input), f64::min);
        (agent.alpha() * s.log_prob.sum() - q.sum()) / obs.ncols() as f64
    };
    let sample = a.policy.sample_with_noise(&obs, &noise);
    let (q, dq) = a.min_q_with_grad(&obs, &sample.squashed);
    let (loss, grads) = a.actor_gradients(&sample, &q, &dq);
    let analytic = grads.flatten();
    let worst = (0..a.policy.net.num_params())
        .map(|i| {
            let mut plus = a.clone();
            plus.policy.net = perturbed(&a.policy.net, i, H);
            let mut minus = a.clone();
            minus.policy.net = perturbed(&a.policy.net, i, -H);
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * H);
            tolerance_units(fd, analytic[i])
        })
        .fold(0.0, f64::max);
    (worst, (loss - loss_of(&a)).abs())
}

/// Temperature objective `α·mean(−logπ − H̄)` w.r.t. log α.
pub fn temperature_path(log_alpha: f64) -> f64 {
    let mut a = mini_agent(1);
    a.log_alpha = log_alpha;
    let lp = DVector::from_vec(vec![-0.3, 0.2, -1.7, 0.9]);
    let h_bar = a.target_entropy();
    let objective = |la: f64| la.exp() * lp.iter().map(|l| -l - h_bar).sum::<f64>() / lp.len() as f64;
    let fd = (objective(log_alpha + H) - objective(log_alpha - H)) / (2.0 * H);
    tolerance_units(fd, a.temperature_gradient(&lp))
}

/// Worst error over all paths and seeds 0..5.
pub fn all_paths() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        worst = worst.max(critic_path(seed)).max(actor_path(seed).0);
    }
    worst.max(temperature_path(0.3f64.ln())).max(temperature_path(-3.0))
}
