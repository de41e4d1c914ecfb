use gridit::denoiser::{DenoiserConfig, DenoiserModel, DitParams};
use gridit::diffusion::NoisePredictor;
use gridit::posembed::PosScheme;
use gridit::rng::{gaussian_image, rng_for};
use gridit::Image;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

fn config(conditional: bool, cond_in_adaln: bool) -> DenoiserConfig {
    DenoiserConfig {
        input_channels: 2,
        input_size: 8,
        patch: 2,
        depth: 2,
        width: 12,
        heads: 3,
        mlp_ratio: 2,
        time_dim: 8,
        conditional,
        cond_in_adaln,
        pos_scheme: PosScheme::Combined,
        grid_k: 2,
    }
}

/// A model whose zero-initialized layers are replaced by random values so that
/// every gradient path is exercised.
fn randomized(cfg: DenoiserConfig, seed: u64) -> DenoiserModel<f64> {
    let mut rng = rng_for(seed, &[]);
    let mut m = DenoiserModel::<f64>::new(cfg, &mut rng).unwrap();
    let noise = Normal::new(0.0, 0.3).unwrap();
    for t in m.params.tensors_mut() {
        for v in &mut t.data {
            *v += noise.sample(&mut rng);
        }
    }
    m
}

fn loss(m: &DenoiserModel<f64>, x: &[Image], t: &[usize], cond: Option<&[Image]>, y: &[Image]) -> f64 {
    m.mse_and_grad(x, t, cond, y).unwrap().0
}

fn family(name: &str) -> &str {
    name.rsplit('.').nth(1).unwrap_or(name)
}

fn check(cfg: DenoiserConfig, seed: u64) {
    let mut m = randomized(cfg.clone(), seed);
    let mut rng = rng_for(seed, &[1]);
    let b = 2;
    let x: Vec<Image> = (0..b).map(|_| gaussian_image(&mut rng, 2, 8, 8)).collect();
    let w: Vec<Image> = (0..b).map(|_| gaussian_image(&mut rng, 2, 8, 8)).collect();
    let cond: Option<Vec<Image>> = cfg.conditional.then(|| (0..b).map(|_| gaussian_image(&mut rng, 2, 8, 8)).collect());
    let t = [37usize, 811];

    let (_, grad): (f64, DitParams<f64>) = m.mse_and_grad(&x, &t, cond.as_deref(), &w).unwrap();
    let grads: Vec<(String, Vec<f64>)> = grad.named_tensors().into_iter().map(|(n, t)| (n, t.data.clone())).collect();

    let mut worst = 0.0f64;
    let mut families = std::collections::BTreeMap::<String, usize>::new();
    for (ti, (name, g)) in grads.iter().enumerate() {
        let picks = 6.min(g.len());
        for _ in 0..picks {
            let i = rng.random_range(0..g.len());
            let h = 1e-5;
            let orig = m.params.tensors_mut()[ti].data[i];
            m.params.tensors_mut()[ti].data[i] = orig + h;
            let lp = loss(&m, &x, &t, cond.as_deref(), &w);
            m.params.tensors_mut()[ti].data[i] = orig - h;
            let lm = loss(&m, &x, &t, cond.as_deref(), &w);
            m.params.tensors_mut()[ti].data[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-2);
            worst = worst.max(rel);
            assert!(rel < 1e-2, "{name}[{i}]: analytic {} vs numeric {fd} (rel {rel})", g[i]);
            *families.entry(family(name).to_string()).or_default() += 1;
        }
    }
    eprintln!("worst relative error {worst:.2e} over {families:?}");
}

#[test]
fn unconditional_gradients_match_finite_differences() {
    check(config(false, false), 11);
}

#[test]
fn conditional_gradients_match_finite_differences() {
    check(config(true, true), 12);
    check(config(true, false), 13);
}
