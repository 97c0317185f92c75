mod common;

use nalgebra::DVector;
use pmelm::model::{
    self, eb_estimate, finite_difference_hessian, score_and_hessian, subject_loglik, subject_logliks,
    total_loglik, QuadratureRule, Theta,
};
use pmelm::simulate::{generate, GenSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_theta(rng: &mut ChaCha8Rng) -> Theta {
    let beta = vec![
        rng.random_range(0.5..2.0),
        rng.random_range(-0.5..0.8),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.5..0.5),
    ];
    Theta::new(beta, rng.random_range(0.05..1.0)).unwrap()
}

#[test]
fn loglik_matches_dense_trapezoid() {
    let data = common::panel(0.5, 11);
    let design = common::design(&data);
    let rule = QuadratureRule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let theta = random_theta(&mut rng);
        let i = rng.random_range(0..design.n_subjects());
        let l = subject_loglik(&design, i, &theta, &rule).unwrap();
        let (oracle, _, _) = common::trapezoid_oracle(&design, i, &theta, 20001);
        assert!((l - oracle).abs() <= 1e-8 * oracle.abs(), "{l} vs {oracle}");
    }
}

#[test]
fn eb_moments_match_dense_posterior() {
    let data = common::panel(1.0, 5);
    let design = common::design(&data);
    let rule = QuadratureRule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let theta = random_theta(&mut rng);
        let i = rng.random_range(0..design.n_subjects());
        let eb = eb_estimate(&design, i, &theta, &rule).unwrap();
        let (_, mean, var) = common::trapezoid_oracle(&design, i, &theta, 20001);
        assert!((eb.b_hat - mean).abs() <= 1e-6, "mean {} vs {mean}", eb.b_hat);
        assert!((eb.var_b - var).abs() <= 1e-6, "var {} vs {var}", eb.var_b);
        assert!(eb.var_b < theta.sigma1_sq);
    }
}

#[test]
fn score_matches_central_differences() {
    let data = common::panel(0.5, 21);
    let design = common::design(&data);
    let rule = QuadratureRule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let theta = random_theta(&mut rng);
        let i = rng.random_range(0..design.n_subjects());
        let d = score_and_hessian(&design, &theta, &rule).unwrap();
        let v = theta.to_vector();
        for k in 0..v.len() {
            let h = 1e-5;
            let at = |x: f64| {
                let mut w = v.clone();
                w[k] = x;
                subject_loglik(&design, i, &Theta::from_vector(&w), &rule).unwrap()
            };
            let fd = (at(v[k] + h) - at(v[k] - h)) / (2.0 * h);
            let an = d.delta[(k, i)];
            assert!((an - fd).abs() <= 1e-4 * fd.abs(), "k={k}: {an} vs {fd}");
        }
    }
}

#[test]
fn analytic_hessian_is_symmetric_and_matches_differences() {
    let data = common::panel(0.5, 2);
    let fit = common::fit(&data);
    let h = &fit.hessian;
    assert!((h - h.transpose()).amax() <= 1e-8);
    let fd = finite_difference_hessian(&fit.design, &fit.theta_hat, &fit.rule).unwrap();
    assert!((h - &fd).amax() <= 1e-4 * h.amax());
}

#[test]
fn fit_invariants_hold() {
    let data = common::panel(1.0, 9);
    let fit = common::fit(&data);
    let sum: f64 = fit.li.iter().sum();
    assert!((sum - fit.loglik).abs() <= 1e-8 * fit.loglik.abs());
    let g = fit.delta.column_sum();
    assert!(g.amax() <= 1e-5 * fit.hessian.amax());
    let eig = fit.hessian.clone().symmetric_eigen().eigenvalues;
    assert!(eig.iter().all(|&e| e < 0.0));
    let refit = model::fit_ml(&data, &fit.design.spec, &fit.rule, Some(&fit.theta_hat)).unwrap();
    assert!(refit.iterations <= 2);
    assert!((refit.theta_hat.to_vector() - fit.theta_hat.to_vector()).amax() <= 1e-8);
}

#[test]
fn quadrature_converges_between_orders() {
    for (sigma1, seed) in [(0.25, 1), (0.5, 2), (1.0, 3)] {
        let data = common::panel(sigma1, seed);
        let fit = common::fit(&data);
        let a = subject_logliks(&fit.design, &fit.theta_hat, &QuadratureRule::new(25)).unwrap();
        let b = subject_logliks(&fit.design, &fit.theta_hat, &QuadratureRule::new(50)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-8);
        }
    }
}

#[test]
fn total_loglik_is_linear_in_weights() {
    let data = common::panel(0.5, 4);
    let design = common::design(&data);
    let rule = QuadratureRule::default();
    let theta = Theta::new(pmelm::simulate::DEFAULT_BETA.to_vec(), 0.3).unwrap();
    let m = design.n_subjects();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w1: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..2.0)).collect();
    let w2: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..2.0)).collect();
    let (a, b) = (0.7, -1.3);
    let combo: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
    let lhs = total_loglik(&design, &theta, &combo, &rule).unwrap();
    let rhs = a * total_loglik(&design, &theta, &w1, &rule).unwrap()
        + b * total_loglik(&design, &theta, &w2, &rule).unwrap();
    assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs());

    let ones = vec![1.0; m];
    let full = total_loglik(&design, &theta, &ones, &rule).unwrap();
    let li = subject_logliks(&design, &theta, &rule).unwrap();
    assert_eq!(full, li.iter().sum::<f64>());
    let mut drop = ones.clone();
    drop[7] = 0.0;
    let deleted = total_loglik(&design, &theta, &drop, &rule).unwrap();
    assert!((deleted - (full - li[7])).abs() <= 1e-10 * full.abs());
}

#[test]
fn parameters_are_recovered_from_a_large_panel() {
    let spec = common::no_baseline_spec();
    let truth = [1.0, -0.3, 0.4];
    let gen = GenSpec {
        m1: 500,
        sigma1: 0.5,
        beta: truth.to_vec(),
        seed: 17,
        ..GenSpec::default()
    };
    let data = generate(&gen, &spec).unwrap().panel;
    let fit = model::fit_ml(&data, &spec, &QuadratureRule::default(), None).unwrap();
    let cov = (-&fit.hessian).try_inverse().unwrap();
    let est = fit.theta_hat.to_vector();
    let want = DVector::from_iterator(4, truth.iter().copied().chain([0.25]));
    for k in 0..4 {
        assert!((est[k] - want[k]).abs() <= 3.0 * cov[(k, k)].sqrt(), "param {k}: {}", est[k]);
    }
}

#[test]
fn near_zero_variance_is_recovered() {
    let spec = common::no_baseline_spec();
    let gen = GenSpec {
        m1: 500,
        sigma1: 1e-6,
        beta: vec![1.0, 0.0, 0.0],
        seed: 23,
        ..GenSpec::default()
    };
    let data = generate(&gen, &spec).unwrap().panel;
    let fit = model::fit_ml(&data, &spec, &QuadratureRule::default(), None).unwrap();
    assert!(fit.theta_hat.sigma1_sq <= 0.01, "{}", fit.theta_hat.sigma1_sq);
}

#[test]
fn eb_spread_tracks_the_generating_variance() {
    let spec = common::no_baseline_spec();
    let gen = GenSpec {
        m1: 2000,
        sigma1: 0.5,
        beta: vec![2.5, -0.2, 0.3],
        seed: 31,
        ..GenSpec::default()
    };
    let data = generate(&gen, &spec).unwrap().panel;
    let fit = model::fit_ml(&data, &spec, &QuadratureRule::default(), None).unwrap();
    let b: Vec<f64> = fit.eb.iter().map(|e| e.b_hat).collect();
    let n = b.len() as f64;
    let mean = b.iter().sum::<f64>() / n;
    let var = b.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var - 0.25).abs() <= 0.15 * 0.25, "{var}");
}
