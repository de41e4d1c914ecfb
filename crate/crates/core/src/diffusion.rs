//! DDPM noise schedules, forward corruption, single reverse steps, respacing
//! and the ε-prediction loss.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, with the convention `ᾱ₀ := 1`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::rng::{gaussian_like, Rng};
use rand::Rng as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaKind {
    /// `σ_t² = β̃_t = β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t)`
    #[default]
    Posterior,
    /// `σ_t² = β_t`
    Beta,
}

#[inline]
fn sigma_for(beta: f64, alpha_bar_prev: f64, alpha_bar: f64, kind: SigmaKind) -> f64 {
    match kind {
        SigmaKind::Posterior => (beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)).sqrt(),
        SigmaKind::Beta => beta.sqrt(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub sigma: SigmaKind,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02, sigma: SigmaKind::Posterior }
    }
}

/// The training-time schedule. Vectors are indexed by `t - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub params: ScheduleParams,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `ᾱ_t` with `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    build_schedule_with(ScheduleParams { steps, beta_start, beta_end, sigma: SigmaKind::Posterior })
}

/// Linear β schedule.
pub fn build_schedule_with(p: ScheduleParams) -> Result<NoiseSchedule> {
    ensure!(p.steps >= 1, InvalidArgument, "schedule needs at least one step");
    ensure!(
        p.beta_start > 0.0 && p.beta_start <= p.beta_end && p.beta_end < 1.0,
        InvalidArgument,
        "need 0 < beta_start <= beta_end < 1, got {} and {}",
        p.beta_start,
        p.beta_end
    );
    let n = p.steps;
    let beta: Vec<f64> =
        (0..n)
            .map(|i| {
                if n == 1 {
                    p.beta_start
                } else {
                    p.beta_start + (p.beta_end - p.beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(n);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma = (0..n)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            sigma_for(beta[i], prev, alpha_bar[i], p.sigma)
        })
        .collect();
    Ok(NoiseSchedule { params: p, beta, alpha, alpha_bar, sigma })
}

/// Per-step coefficients of a reverse chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefs {
    /// Training timestep fed to the model.
    pub model_t: usize,
    pub alpha: f64,
    pub beta: f64,
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
    pub sigma: f64,
}

/// A (possibly respaced) sampling chain of `T_s` steps. Vectors are indexed by
/// `i - 1` for chain step `i ∈ [1, T_s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingSchedule {
    pub timesteps: Vec<usize>,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl SamplingSchedule {
    /// The un-respaced chain over every training step.
    pub fn full(sched: &NoiseSchedule) -> Self {
        Self {
            timesteps: (1..=sched.steps()).collect(),
            beta: sched.beta.clone(),
            alpha_bar: sched.alpha_bar.clone(),
            sigma: sched.sigma.clone(),
        }
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    /// `ᾱ` at chain step `i`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, i: usize) -> f64 {
        if i == 0 {
            1.0
        } else {
            self.alpha_bar[i - 1]
        }
    }

    pub fn coefs(&self, i: usize) -> StepCoefs {
        assert!(i >= 1 && i <= self.steps(), "chain step {i} out of range");
        let beta = self.beta[i - 1];
        StepCoefs {
            model_t: self.timesteps[i - 1],
            alpha: 1.0 - beta,
            beta,
            alpha_bar: self.alpha_bar[i - 1],
            alpha_bar_prev: self.alpha_bar_at(i - 1),
            sigma: self.sigma[i - 1],
        }
    }

    /// The largest chain step whose training timestep does not exceed `t`
    /// (0 when `t` is below the first kept timestep).
    pub fn step_at_or_below(&self, t: usize) -> usize {
        self.timesteps.iter().take_while(|&&s| s <= t).count()
    }
}

/// Keeps `T_s` timesteps at a uniform stride ending at `T` and recomputes the
/// effective betas `β'_i = 1 - ᾱ(τ_i)/ᾱ(τ_{i-1})`.
pub fn respace(sched: &NoiseSchedule, sample_steps: usize) -> Result<SamplingSchedule> {
    let t_max = sched.steps();
    ensure!(
        sample_steps >= 1 && sample_steps <= t_max,
        InvalidArgument,
        "T_s={sample_steps} must lie in [1, T={t_max}]"
    );
    let timesteps: Vec<usize> = (1..=sample_steps).map(|i| i * t_max / sample_steps).collect();
    let mut beta = Vec::with_capacity(sample_steps);
    let mut alpha_bar = Vec::with_capacity(sample_steps);
    let mut sigma = Vec::with_capacity(sample_steps);
    let mut prev_t = 0usize;
    for &t in &timesteps {
        let ab = sched.alpha_bar_at(t);
        let ab_prev = sched.alpha_bar_at(prev_t);
        // consecutive steps keep the original beta bit-for-bit
        let b = if t - prev_t == 1 { sched.beta[t - 1] } else { 1.0 - ab / ab_prev };
        let s = sigma_for(b, ab_prev, ab, sched.params.sigma);
        beta.push(b);
        alpha_bar.push(ab);
        sigma.push(s);
        prev_t = t;
    }
    Ok(SamplingSchedule { timesteps, beta, alpha_bar, sigma })
}

/// `√ᾱ · x0 + √(1-ᾱ) · eps` for an explicit `ᾱ`.
pub fn noise_with(x0: &Image, eps: Option<&Image>, alpha_bar: f64) -> Result<Image> {
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).sqrt();
    match eps {
        None => Ok(x0.map(|v| (a * v as f64) as f32)),
        Some(e) => x0.zip_map(e, |v, n| (a * v as f64 + s * n as f64) as f32),
    }
}

/// `x_t = √ᾱ_t x0 + √(1-ᾱ_t) ε` on the training schedule; `t = 0` returns `x0`.
pub fn forward_noise(x0: &Image, t: usize, eps: &Image, sched: &NoiseSchedule) -> Result<Image> {
    ensure!(t <= sched.steps(), InvalidArgument, "timestep {t} beyond T={}", sched.steps());
    x0.ensure_same_shape(eps, "forward_noise eps")?;
    if t == 0 {
        return Ok(x0.clone());
    }
    noise_with(x0, Some(eps), sched.alpha_bar_at(t))
}

/// `x_{i-1} = (x_i - β_i/√(1-ᾱ_i) · ε̂) / √α_i + σ_i · ε`. At `i = 1` the fresh
/// noise is ignored.
pub fn reverse_step(
    x_t: &Image,
    i: usize,
    eps_pred: &Image,
    eps: Option<&Image>,
    sched: &SamplingSchedule,
) -> Result<Image> {
    ensure!(i >= 1, InvalidArgument, "reverse step needs t >= 1");
    ensure!(i <= sched.steps(), InvalidArgument, "reverse step {i} beyond T_s={}", sched.steps());
    apply_reverse(x_t, eps_pred, if i == 1 { None } else { eps }, &sched.coefs(i))
}

pub fn apply_reverse(x_t: &Image, eps_pred: &Image, eps: Option<&Image>, c: &StepCoefs) -> Result<Image> {
    x_t.ensure_same_shape(eps_pred, "reverse_step eps_pred")?;
    let inv_sqrt_alpha = 1.0 / c.alpha.sqrt();
    let coef = c.beta / (1.0 - c.alpha_bar).sqrt();
    let mut out = x_t.zip_map(eps_pred, |x, e| (inv_sqrt_alpha * (x as f64 - coef * e as f64)) as f32)?;
    if let Some(z) = eps {
        out.ensure_same_shape(z, "reverse_step eps")?;
        if c.sigma != 0.0 {
            for (o, &n) in out.data_mut().iter_mut().zip(z.data()) {
                *o = (*o as f64 + c.sigma * n as f64) as f32;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training objective

/// A model that predicts the noise in `x_t` and can differentiate the ε-MSE.
pub trait NoisePredictor {
    type Grad;

    fn predict(&self, x_t: &[Image], t: &[usize], cond: Option<&[Image]>) -> Result<Vec<Image>>;

    /// Mean squared error between the prediction and `target` over every value
    /// of the batch, together with its parameter gradient.
    fn mse_and_grad(
        &self,
        x_t: &[Image],
        t: &[usize],
        cond: Option<&[Image]>,
        target: &[Image],
    ) -> Result<(f64, Self::Grad)>;
}

#[derive(Clone, Debug)]
pub struct LossSample<G> {
    pub loss: f64,
    pub grad: G,
    pub timesteps: Vec<usize>,
}

/// Draws `t ~ U[1, T]` and `ε ~ N(0, I)` per item, then evaluates the ε-MSE.
pub fn training_loss<M: NoisePredictor>(
    model: &M,
    x0_batch: &[Image],
    cond: Option<&[Image]>,
    rng: &mut Rng,
    sched: &NoiseSchedule,
) -> Result<LossSample<M::Grad>> {
    ensure!(!x0_batch.is_empty(), InvalidArgument, "empty training batch");
    let t_max = sched.steps();
    let mut timesteps = Vec::with_capacity(x0_batch.len());
    let mut noisy = Vec::with_capacity(x0_batch.len());
    let mut eps_all = Vec::with_capacity(x0_batch.len());
    for x0 in x0_batch {
        let t = rng.random_range(1..=t_max);
        let eps = gaussian_like(rng, x0);
        noisy.push(forward_noise(x0, t, &eps, sched)?);
        eps_all.push(eps);
        timesteps.push(t);
    }
    let (loss, grad) = model.mse_and_grad(&noisy, &timesteps, cond, &eps_all)?;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("training loss diverged ({loss})")));
    }
    Ok(LossSample { loss, grad, timesteps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_image, rng_for};

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, 0.05, 0.05).unwrap();
        assert_eq!(s.alpha_bar[0], 1.0 - 0.05);
    }

    #[test]
    fn default_schedule_first_value() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar_at(1), 0.9999);
        assert_eq!(s.alpha_bar_at(0), 1.0);
        assert!((s.beta[999] - 0.02).abs() < 1e-15);
        for t in 1..=1000 {
            assert!(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
            assert_eq!(s.alpha_bar_at(t), s.alpha_bar_at(t - 1) * s.alpha[t - 1]);
        }
        assert_eq!(s.sigma[0], 0.0);
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(build_schedule(0, 1e-4, 0.02).is_err());
        assert!(build_schedule(10, 0.0, 0.02).is_err());
        assert!(build_schedule(10, 0.03, 0.02).is_err());
        assert!(build_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_endpoints() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = rng_for(1, &[]);
        let x0 = gaussian_image(&mut rng, 3, 4, 4);
        let eps = gaussian_image(&mut rng, 3, 4, 4);
        assert_eq!(forward_noise(&x0, 0, &eps, &s).unwrap(), x0);
        let xt = forward_noise(&x0, 1000, &eps, &s).unwrap();
        assert!(xt.max_abs_diff(&eps) < 0.02);
        assert!(forward_noise(&x0, 3, &Image::zeros(3, 4, 5), &s).is_err());
    }

    #[test]
    fn reverse_first_step_recovers_x0() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let full = SamplingSchedule::full(&s);
        let mut rng = rng_for(2, &[]);
        let x0 = gaussian_image(&mut rng, 3, 8, 8);
        let eps = gaussian_image(&mut rng, 3, 8, 8);
        let x1 = forward_noise(&x0, 1, &eps, &s).unwrap();
        let junk = gaussian_image(&mut rng, 3, 8, 8);
        let back = reverse_step(&x1, 1, &eps, Some(&junk), &full).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-6);
        assert!(reverse_step(&x1, 0, &eps, None, &full).is_err());
    }

    #[test]
    fn reverse_without_noise_rescales() {
        let s = build_schedule(100, 1e-3, 0.02).unwrap();
        let full = SamplingSchedule::full(&s);
        let x = Image::filled(1, 2, 2, 0.7);
        let out = reverse_step(&x, 50, &Image::zeros(1, 2, 2), None, &full).unwrap();
        let expect = 0.7f64 / s.alpha[49].sqrt();
        assert!((out.at(0, 1, 1) as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn respace_identity_and_stride() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(respace(&s, 1000).unwrap(), SamplingSchedule::full(&s));
        let r = respace(&s, 250).unwrap();
        assert_eq!(r.steps(), 250);
        assert_eq!(*r.timesteps.last().unwrap(), 1000);
        assert_eq!(r.timesteps[0], 4);
        for (i, &t) in r.timesteps.iter().enumerate() {
            assert_eq!(r.alpha_bar[i], s.alpha_bar_at(t));
        }
        assert!(r.timesteps.windows(2).all(|w| w[0] < w[1]));
        assert!(respace(&s, 1001).is_err());
        assert!(respace(&s, 0).is_err());
        assert_eq!(r.step_at_or_below(50), 12);
        assert_eq!(r.step_at_or_below(3), 0);
    }

    #[test]
    fn respaced_alpha_bar_recursion_holds() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let r = respace(&s, 37).unwrap();
        for i in 1..=r.steps() {
            let c = r.coefs(i);
            let rel = (c.alpha_bar_prev * c.alpha - c.alpha_bar).abs() / c.alpha_bar;
            assert!(rel < 1e-12, "step {i}: {rel}");
        }
    }
}
