use proptest::prelude::*;

use revcd::diffusion::{eps_from_x0, forward_noise, posterior_mean_var, precondition, unmap};
use revcd::eval::{cosine_distance, harmonic_mean, per_class_accuracy};
use revcd::sampling::{cfg_combine, reverse_step, NoiseMode};
use revcd::{NoiseSchedule, RngState, Tensor};

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(100, 1e-4, 0.02).unwrap()
}

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    RngState::new(seed).gaussian(&[rows, cols])
}

proptest! {
    #[test]
    fn noising_then_implied_noise_recovers_eps(seed in any::<u64>(), t in 1usize..=100) {
        let sched = schedule();
        let (s0, eps) = (tensor(3, 5, seed), tensor(3, 5, seed ^ 1));
        let ts = vec![t; 3];
        let st = forward_noise(&s0, &ts, &eps, &sched).unwrap();
        let back = eps_from_x0(&st, &s0, &ts, &sched).unwrap();
        prop_assert!(back.sub(&eps).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn posterior_mean_is_a_convex_combination_at_fixed_points(seed in any::<u64>(), t in 2usize..=100) {
        // when s_t equals the noiseless path of s0, the posterior mean lies on it too
        let sched = schedule();
        let s0 = tensor(2, 4, seed);
        let zero = Tensor::zeros(&[2, 4]);
        let st = forward_noise(&s0, &[t, t], &zero, &sched).unwrap();
        let (mu, var) = posterior_mean_var(&st, &s0, &[t, t], &sched).unwrap();
        let expect = forward_noise(&s0, &[t - 1, t - 1], &zero, &sched).unwrap();
        prop_assert!(mu.sub(&expect).unwrap().max_abs() < 1e-12);
        prop_assert!(var.iter().all(|&v| v > 0.0 && v < sched.beta(t)));
    }

    #[test]
    fn guidance_is_affine_in_g(seed in any::<u64>(), g in 0.0f64..10.0) {
        let (c, u) = (tensor(2, 3, seed), tensor(2, 3, seed ^ 7));
        let got = cfg_combine(&c, &u, g).unwrap();
        let diff = c.sub(&u).unwrap();
        let mut want = c.clone();
        want.axpy(g, &diff).unwrap();
        prop_assert!(got.sub(&want).unwrap().max_abs() < 1e-12 * (1.0 + g));
    }

    #[test]
    fn reverse_steps_stay_finite_for_wild_estimates(seed in any::<u64>(), t in 1usize..=100, scale in 1.0f64..1e6) {
        let sched = schedule();
        let st = tensor(2, 4, seed);
        let wild = tensor(2, 4, seed ^ 3).scale(scale);
        let z = tensor(2, 4, seed ^ 5);
        for mode in [NoiseMode::PosteriorSqrt, NoiseMode::BetaSqrt, NoiseMode::BetaLiteral] {
            let out = reverse_step(&st, &wild, t, &sched, mode, &z).unwrap();
            prop_assert!(out.is_finite());
            // clipping bounds the estimate's contribution
            let bound = st.max_abs() + 1.0 + 3.0 * z.max_abs();
            prop_assert!(out.max_abs() <= bound);
        }
    }

    #[test]
    fn precondition_round_trips_inside_unit_box(v in prop::collection::vec(0.0f64..=1.0, 1..12)) {
        let s = Tensor::<f64>::from_f64(&[1, v.len()], &v).unwrap();
        let back = unmap(&precondition(&s));
        prop_assert!(back.sub(&s).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn cosine_distance_is_scale_invariant(v in prop::collection::vec(0.1f64..5.0, 2..10), k in 0.01f64..100.0) {
        let w: Vec<f64> = v.iter().rev().copied().collect();
        let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
        let a = cosine_distance(&v, &w).unwrap();
        let b = cosine_distance(&scaled, &w).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1e-12..=2.0).contains(&a));
    }

    #[test]
    fn harmonic_mean_lies_between_min_and_mean(s in 0.0f64..1.0, u in 0.0f64..1.0) {
        let h = harmonic_mean(s, u);
        prop_assert!(h <= 0.5 * (s + u) + 1e-15);
        prop_assert!(h + 1e-15 >= s.min(u) || s + u == 0.0);
    }

    #[test]
    fn per_class_accuracy_ignores_class_imbalance(n_a in 1usize..50, n_b in 1usize..50) {
        // class 0 always right, class 1 always wrong: 0.5 regardless of counts
        let truths: Vec<usize> = std::iter::repeat_n(0, n_a).chain(std::iter::repeat_n(1, n_b)).collect();
        let preds = vec![0; n_a + n_b];
        let acc = per_class_accuracy(&preds, &truths, &[0, 1]).unwrap();
        prop_assert!((acc - 0.5).abs() < 1e-15);
    }
}
