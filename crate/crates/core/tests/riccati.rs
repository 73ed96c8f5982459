mod support;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sacclf_core::clf::{linearize, LinearModel};
use sacclf_core::{lqr_clf, solve_lyapunov, Environment, QuadraticClf};

fn check_are(lin: &LinearModel, q: &DMatrix<f64>, r: &DMatrix<f64>) {
    let (res, hurwitz) = support::are_quality(lin, q, r).unwrap_or_else(|e| panic!("{e}"));
    assert!(res < 1e-8, "residual {res:e}");
    assert!(hurwitz);
}

#[test]
fn random_stabilizable_systems() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let (lin, q, r) = support::random_lqr_problem(&mut rng);
        check_are(&lin, &q, &r);
    }
}

#[test]
fn both_environments_satisfy_riccati() {
    for env in [Environment::nct(), Environment::satellite()] {
        let model = env.error_model();
        let (n, m) = (model.state_dim(), model.input_dim());
        let lin = linearize(&model, &DVector::zeros(n), &DVector::zeros(m)).unwrap();
        check_are(&lin, &DMatrix::identity(n, n), &DMatrix::identity(m, m));
        let clf = lqr_clf(&env, 0.1).unwrap();
        assert!(clf.min_eigenvalue() > 0.0);
    }
}

#[test]
fn lyapunov_hand_solution() {
    // AᵀX + XA + I = 0 solved entry by entry.
    let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -3.0]);
    let x = solve_lyapunov(&a, &DMatrix::identity(2, 2)).unwrap();
    let expected = DMatrix::from_row_slice(2, 2, &[0.5, 0.125, 0.125, 5.0 / 24.0]);
    assert!((x - expected).amax() < 1e-9);
}

#[test]
fn lyapunov_matches_gramian_quadrature() {
    // X = ∫₀^∞ e^{Aᵀt} Q e^{At} dt, integrated with a fine trapezoid rule.
    let a = DMatrix::from_row_slice(3, 3, &[-2.0, 1.0, 0.0, 0.0, -1.0, 0.5, 0.3, 0.0, -1.5]);
    let q = DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let h = 1e-3;
    let step = (&a * h).exp();
    let mut phi = DMatrix::<f64>::identity(3, 3);
    let mut integral = &q * (0.5 * h);
    for _ in 0..40_000 {
        phi = &phi * &step;
        integral += phi.transpose() * &q * &phi * h;
    }
    let x = solve_lyapunov(&a, &q).unwrap();
    assert!((x - integral).amax() < 1e-6);
}

proptest! {
    #[test]
    fn clf_gradient_matches_finite_differences(
        seed in 0u64..10_000,
        n in 1usize..7,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clf = QuadraticClf::new(support::random_spd(n, &mut rng), 0.1).unwrap();
        let e = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let (v, grad) = clf.eval(&e);
        prop_assert!(v > 0.0 || e.norm() == 0.0);
        let h = 1e-6;
        for i in 0..n {
            let mut ep = e.clone();
            ep[i] += h;
            let mut em = e.clone();
            em[i] -= h;
            let fd = (clf.value(&ep) - clf.value(&em)) / (2.0 * h);
            prop_assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }
}
