//! Every update path against central finite differences on tiny networks.

mod support;

use support::{actor_path, critic_path, mini_agent, temperature_path};

#[test]
fn miniature_networks_are_tiny() {
    let a = mini_agent(0);
    assert_eq!(a.q1.num_params(), 9);
    assert_eq!(a.policy.net.num_params(), 10);
}

#[test]
fn critic_path_matches() {
    for seed in 0..5 {
        let worst = critic_path(seed);
        assert!(worst <= 1.0, "seed {seed}: {worst} tolerances off");
    }
}

#[test]
fn actor_path_matches() {
    for seed in 0..5 {
        let (worst, loss_gap) = actor_path(seed);
        assert!(worst <= 1.0, "seed {seed}: {worst} tolerances off");
        assert!(loss_gap < 1e-12);
    }
}

#[test]
fn temperature_path_matches() {
    for log_alpha in [0.3f64.ln(), -3.0] {
        assert!(temperature_path(log_alpha) <= 1.0);
    }
}
