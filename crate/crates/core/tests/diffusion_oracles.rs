mod common;

use common::{OracleModel, WobbleModel, ZeroModel};
use gridit::diffusion::{build_schedule, forward_noise, respace, reverse_step, SamplingSchedule};
use gridit::rng::{gaussian_image, rng_for};
use gridit::sampler::{reverse_chain, sample_grid};
use gridit::Image;

#[test]
fn forward_moments_within_three_standard_errors() {
    let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
    let x0 = Image::filled(1, 64, 64, 0.7);
    let mut rng = rng_for(21, &[]);
    for t in [1usize, 50, 500, 1000] {
        let mut vals = Vec::new();
        for _ in 0..8 {
            let eps = gaussian_image(&mut rng, 1, 64, 64);
            let xt = forward_noise(&x0, t, &eps, &sched).unwrap();
            vals.extend(xt.data().iter().map(|&v| v as f64));
        }
        let n = vals.len() as f64;
        let ab = sched.alpha_bar_at(t);
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let want_mean = ab.sqrt() * 0.7;
        let want_var = 1.0 - ab;
        let se_mean = want_var.sqrt() / n.sqrt();
        let se_var = want_var * (2.0 / (n - 1.0)).sqrt();
        assert!((mean - want_mean).abs() < 3.0 * se_mean + 1e-6, "t={t}: mean {mean} vs {want_mean}");
        assert!((var - want_var).abs() < 3.0 * se_var + 1e-9, "t={t}: var {var} vs {want_var}");
    }
}

#[test]
fn one_step_algebraic_recovery() {
    let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
    let full = SamplingSchedule::full(&sched);
    let mut rng = rng_for(22, &[]);
    let x0 = gaussian_image(&mut rng, 3, 16, 16).map(|v| v.clamp(-1.0, 1.0));
    let eps = gaussian_image(&mut rng, 3, 16, 16);
    let x1 = forward_noise(&x0, 1, &eps, &sched).unwrap();
    let z = gaussian_image(&mut rng, 3, 16, 16);
    let back = reverse_step(&x1, 1, &eps, Some(&z), &full).unwrap();
    assert!(back.max_abs_diff(&x0) < 1e-6, "error {}", back.max_abs_diff(&x0));
}

#[test]
fn oracle_noise_chain_reconstructs_clean_image() {
    let sched = build_schedule(10, 1e-4, 0.02).unwrap();
    let full = SamplingSchedule::full(&sched);
    let mut rng = rng_for(23, &[]);
    let x0 = Image::from_fn(3, 8, 8, |c, y, x| ((c * 11 + y * 3 + x * 5) % 17) as f32 / 16.0);
    let eps = gaussian_image(&mut rng, 3, 8, 8);
    let xt = forward_noise(&x0, 10, &eps, &sched).unwrap();
    let model = OracleModel { x0: x0.clone(), sched: sched.clone() };
    let out = reverse_chain(&model, &full, xt, 10, None, &mut rng, None).unwrap();
    assert!(out.max_abs_diff(&x0) < 1e-4, "error {}", out.max_abs_diff(&x0));
}

#[test]
fn respaced_full_length_equals_unrespaced_bit_exactly() {
    let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
    let full = SamplingSchedule::full(&sched);
    let same = respace(&sched, 1000).unwrap();
    assert_eq!(same, full);
    let a = {
        let mut rng = rng_for(24, &[]);
        sample_grid(&WobbleModel, &full, (1, 4, 4), &mut rng).unwrap()
    };
    let b = {
        let mut rng = rng_for(24, &[]);
        sample_grid(&WobbleModel, &same, (1, 4, 4), &mut rng).unwrap()
    };
    assert_eq!(a, b);
}

#[test]
fn zero_model_samples_follow_the_prior_variance() {
    let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
    let s = respace(&sched, 250).unwrap();
    // v_{i-1} = v_i / α_i + σ_i², with the noise dropped at the final step
    let mut v = 1.0f64;
    for i in (1..=s.steps()).rev() {
        let c = s.coefs(i);
        v /= c.alpha;
        if i > 1 {
            v += c.sigma * c.sigma;
        }
    }
    let want = v.sqrt();
    let mut vals = Vec::new();
    for n in 0..64 {
        let mut rng = rng_for(25, &[n]);
        let x = sample_grid(&ZeroModel, &s, (3, 4, 4), &mut rng).unwrap();
        vals.extend(x.data().iter().map(|&v| v as f64));
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let std = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
    assert!((std - want).abs() < 0.2 * want, "empirical std {std} vs analytic {want}");
}

#[test]
fn single_step_sampling_is_deterministic_map() {
    let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
    let s = respace(&sched, 1).unwrap();
    let mut rng = rng_for(26, &[]);
    let out = sample_grid(&ZeroModel, &s, (1, 4, 4), &mut rng).unwrap();
    let mut rng = rng_for(26, &[]);
    let init = gaussian_image(&mut rng, 1, 4, 4);
    let a = s.coefs(1).alpha;
    let want = init.map(|v| (v as f64 / a.sqrt()) as f32);
    assert_eq!(out, want);
}

#[test]
fn sampling_is_deterministic_given_seed() {
    let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
    let s = respace(&sched, 50).unwrap();
    let run = || sample_grid(&WobbleModel, &s, (3, 8, 8), &mut rng_for(27, &[])).unwrap();
    assert_eq!(run(), run());
}
