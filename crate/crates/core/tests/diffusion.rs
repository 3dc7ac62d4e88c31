mod common;

use diffusion_ad::diffusion::{
    forward_marginal_sample, forward_step_sample, reconstruct, reverse_step, NoiseSchedule, ReconstructionConfig,
};
use diffusion_ad::{Result, Tensor};
use proptest::prelude::*;

fn desk_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

#[test]
fn schedule_recurrence_and_monotonicity() {
    let s = desk_schedule();
    for t in 2..=s.steps() {
        let lhs = s.alpha_bar(t);
        let rhs = s.alpha_bar(t - 1) * (1.0 - s.beta(t));
        assert!((lhs - rhs).abs() < 1e-7, "t={t}");
        assert!(lhs < s.alpha_bar(t - 1));
    }
}

#[test]
fn beta_500_closed_form() {
    let expected = 1e-4 + (500.0 - 1.0) / (1000.0 - 1.0) * (0.02 - 1e-4);
    assert!((desk_schedule().beta(500) - expected).abs() < 1e-15);
}

#[test]
fn noiseless_forward_chain_telescopes() {
    let s = desk_schedule();
    let x0 = Tensor::rand_uniform([2, 3, 4, 4], -1.0, 1.0, &mut common::rng(0));
    let zero = Tensor::zeros(x0.shape().to_vec());
    let mut x = x0.clone();
    for t in 1..=s.steps() {
        x = forward_step_sample(&x, t, &s, &zero).unwrap();
        if [1, 10, 250, 1000].contains(&t) {
            let m = forward_marginal_sample(&x0, t, &s, &zero).unwrap();
            assert!(x.max_abs_diff(&m).unwrap() < 1e-5, "t={t}");
        }
    }
}

/// Mean and variance estimates with their standard errors.
fn moments(samples: &[f64]) -> (f64, f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var, (var / n).sqrt(), var * (2.0 / (n - 1.0)).sqrt())
}

#[test]
fn stochastic_chain_matches_marginal_moments() {
    let s = desk_schedule();
    let t = 200;
    let draws = 10_000;
    let x0 = Tensor::new([1, 4], vec![0.8, -0.3, 0.0, 1.5]).unwrap();
    let mut rng = common::rng(11);
    let mut chained: Vec<Vec<f64>> = vec![Vec::with_capacity(draws); 4];
    let mut direct: Vec<Vec<f64>> = vec![Vec::with_capacity(draws); 4];
    for _ in 0..draws {
        let mut x = x0.clone();
        for k in 1..=t {
            x = forward_step_sample(&x, k, &s, &Tensor::randn([1, 4], &mut rng)).unwrap();
        }
        let m = forward_marginal_sample(&x0, t, &s, &Tensor::randn([1, 4], &mut rng)).unwrap();
        for d in 0..4 {
            chained[d].push(x.data()[d] as f64);
            direct[d].push(m.data()[d] as f64);
        }
    }
    let ab = s.alpha_bar(t);
    for d in 0..4 {
        let want_mean = ab.sqrt() * x0.data()[d] as f64;
        let want_var = 1.0 - ab;
        for samples in [&chained[d], &direct[d]] {
            let (mean, var, se_mean, se_var) = moments(samples);
            assert!((mean - want_mean).abs() < 3.0 * se_mean, "dim {d}: mean {mean} vs {want_mean}");
            assert!((var - want_var).abs() < 3.0 * se_var, "dim {d}: var {var} vs {want_var}");
        }
    }
}

#[test]
fn reverse_step_with_true_noise_matches_substitution() {
    let s = desk_schedule();
    let mut rng = common::rng(4);
    let x_prev = Tensor::randn([1, 6], &mut rng);
    let eps = Tensor::randn([1, 6], &mut rng);
    let t = 37;
    let x_t = forward_step_sample(&x_prev, t, &s, &eps).unwrap();
    let out = reverse_step(&x_t, t, &eps, &s, None).unwrap();
    let (b, ab) = (s.beta(t), s.alpha_bar(t));
    for i in 0..6 {
        let xt = (1.0 - b).sqrt() * x_prev.data()[i] as f64 + b.sqrt() * eps.data()[i] as f64;
        let want = (xt - b / (1.0 - ab).sqrt() * eps.data()[i] as f64) / (1.0 - b).sqrt();
        assert!((out.data()[i] as f64 - want).abs() < 1e-5);
    }
}

#[test]
fn zero_model_deterministic_chain_is_a_pure_scaling() {
    let s = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
    let x_t = Tensor::randn([2, 5], &mut common::rng(8));
    let zero = Tensor::zeros([2, 5]);
    let mut x = x_t.clone();
    for t in (1..=s.steps()).rev() {
        x = reverse_step(&x, t, &zero, &s, None).unwrap();
    }
    let factor: f64 = (1..=s.steps()).map(|t| 1.0 / (1.0 - s.beta(t)).sqrt()).product();
    for (o, i) in x.data().iter().zip(x_t.data()) {
        let want = *i as f64 * factor;
        assert!(((*o as f64) - want).abs() <= 1e-5 * want.abs().max(1.0));
    }
}

/// Predicts exactly the noise that separates `x_t` from the known clean batch.
fn oracle(x0: Tensor, s: NoiseSchedule) -> impl Fn(&Tensor, &[usize]) -> Result<Tensor> {
    move |x_t: &Tensor, t: &[usize]| {
        let ab = s.alpha_bar(t[0]);
        x_t.zip_map(&x0, |x, c| ((x as f64 - ab.sqrt() * c as f64) / (1.0 - ab).sqrt()) as f32)
    }
}

#[test]
fn oracle_model_reconstruction_is_identity() {
    let s = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
    let x0 = Tensor::rand_uniform([3, 1, 8, 8], -1.0, 1.0, &mut common::rng(2));
    for frac in [0.1, 0.4, 1.0] {
        let cfg = ReconstructionConfig::from_fraction(&s, frac, true, 5);
        let out = reconstruct(&x0, &oracle(x0.clone(), s.clone()), &s, &cfg).unwrap();
        let err = out.max_abs_diff(&x0).unwrap();
        assert!(err < 1e-4, "t*={}: {err}", cfg.t_star);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_schedules_are_consistent(steps in 2usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.5) {
        let s = NoiseSchedule::linear(steps, lo, lo + span).unwrap();
        for t in 1..=steps {
            prop_assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * (1.0 - s.beta(t))).abs() < 1e-7);
            prop_assert!(s.alpha_bar(t) <= s.alpha_bar(t - 1));
            prop_assert!((s.sigma(t).powi(2) - s.beta(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_seed_determinism(seed in any::<u64>()) {
        let s = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let x0 = Tensor::rand_uniform([2, 1, 4, 4], -1.0, 1.0, &mut common::rng(seed));
        let model = |x: &Tensor, _: &[usize]| Ok(x.map(|v| 0.1 * v));
        let cfg = ReconstructionConfig::from_fraction(&s, 0.5, false, seed);
        let a = reconstruct(&x0, &model, &s, &cfg).unwrap();
        let b = reconstruct(&x0, &model, &s, &cfg).unwrap();
        prop_assert!(a.bit_eq(&b));
    }
}
