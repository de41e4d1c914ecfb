//! Per-frame refinement: degradations that manufacture (LR, HR) training pairs,
//! conditional training, and super-resolution of coarse frames.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::denoiser::{train_with, DenoiserModel, TrainConfig, TrainError, TrainReport};
use crate::diffusion::{NoisePredictor, NoiseSchedule, SamplingSchedule};
use crate::error::{ensure, Result};
use crate::image::{Image, Sequence};
use crate::nn::Real;
use crate::rng::{gaussian_image, rng_for, tags, Rng};
use crate::sampler::reverse_chain;
use crate::seqgrid::resample_frame;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeParams {
    /// Down/up resampling factor.
    pub scale: usize,
    /// Inclusive integer range of the noise std on the 0–255 scale.
    pub noise_std_min: u32,
    pub noise_std_max: u32,
    pub blur_kernels: Vec<usize>,
    pub blur_prob: f64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self { scale: 4, noise_std_min: 10, noise_std_max: 15, blur_kernels: vec![9, 11, 13, 15], blur_prob: 0.5 }
    }
}

impl DegradeParams {
    /// No resampling, no noise, no blur.
    pub fn null() -> Self {
        Self { scale: 1, noise_std_min: 0, noise_std_max: 0, blur_kernels: vec![3], blur_prob: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.scale >= 1, InvalidArgument, "scale must be positive");
        ensure!(
            self.noise_std_min <= self.noise_std_max,
            InvalidArgument,
            "empty noise range [{}, {}]",
            self.noise_std_min,
            self.noise_std_max
        );
        ensure!(!self.blur_kernels.is_empty(), InvalidArgument, "no blur kernel sizes");
        ensure!(
            self.blur_kernels.iter().all(|&k| k >= 3 && k % 2 == 1),
            InvalidArgument,
            "blur kernels must be odd and >= 3, got {:?}",
            self.blur_kernels
        );
        ensure!(
            (0.0..=1.0).contains(&self.blur_prob),
            InvalidArgument,
            "blur probability {} outside [0, 1]",
            self.blur_prob
        );
        Ok(())
    }
}

/// The random choices of one degradation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradeDraw {
    pub scale: usize,
    pub noise_std: u32,
    pub blur_kernel: Option<usize>,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SRPair {
    pub lr_cond: Image,
    pub hr: Image,
    pub draw: DegradeDraw,
}

/// `σ = 0.3·((k-1)/2 - 1) + 0.8`.
pub fn blur_sigma(kernel: usize) -> f64 {
    0.3 * ((kernel as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

fn gaussian_taps(kernel: usize) -> Vec<f64> {
    let s = blur_sigma(kernel);
    let c = (kernel / 2) as f64;
    let mut t: Vec<f64> = (0..kernel)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * s * s)).exp()
        })
        .collect();
    let sum: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= sum);
    t
}

/// Reflects out-of-range indices without repeating the edge sample
/// (`… 2 1 | 0 1 2 … n-1 | n-2 …`).
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Separable Gaussian blur with a `kernel×kernel` window.
pub fn gaussian_blur(img: &Image, kernel: usize) -> Image {
    let taps = gaussian_taps(kernel);
    let r = (kernel / 2) as isize;
    let (c, h, w) = img.shape();
    let mut out = Image::zeros(c, h, w);
    let mut tmp = vec![0.0f64; h * w];
    for ch in 0..c {
        let src = img.plane(ch);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| t * src[y * w + reflect101(x as isize + k as isize - r, w)] as f64)
                    .sum();
            }
        }
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| t * tmp[reflect101(y as isize + k as isize - r, h) * w + x])
                    .sum::<f64>() as f32;
            }
        }
    }
    out
}

/// Draws the random choices of one degradation.
pub fn draw_degradation(p: &DegradeParams, rng: &mut Rng) -> Result<DegradeDraw> {
    p.validate()?;
    let noise_std = rng.random_range(p.noise_std_min..=p.noise_std_max);
    let blur = rng.random::<f64>() < p.blur_prob;
    let kernel = p.blur_kernels[rng.random_range(0..p.blur_kernels.len())];
    Ok(DegradeDraw { scale: p.scale, noise_std, blur_kernel: blur.then_some(kernel), noise_seed: rng.random() })
}

/// Bicubic down/up resampling by `draw.scale`, Gaussian noise on the 0–255
/// scale with clamping, then the optional blur.
pub fn apply_degradation(hr: &Image, draw: &DegradeDraw) -> Result<Image> {
    let (_, h, w) = hr.shape();
    let s = draw.scale;
    ensure!(s >= 1 && h % s == 0 && w % s == 0, InvalidArgument, "{h}x{w} frame is not divisible by scale {s}");
    let small = resample_frame(hr, h / s, w / s)?;
    let mut x = resample_frame(&small, h, w)?;
    if draw.noise_std > 0 {
        let mut nrng = Rng::seed_from_u64(draw.noise_seed);
        let std = draw.noise_std as f64;
        for v in x.data_mut() {
            let n: f64 = StandardNormal.sample(&mut nrng);
            *v = ((*v as f64 * 255.0 + std * n).clamp(0.0, 255.0) / 255.0) as f32;
        }
    }
    if let Some(k) = draw.blur_kernel {
        x = gaussian_blur(&x, k);
    }
    Ok(x)
}

pub fn degrade(hr: &Image, p: &DegradeParams, rng: &mut Rng) -> Result<SRPair> {
    let (_, h, w) = hr.shape();
    ensure!(
        h % p.scale == 0 && w % p.scale == 0,
        InvalidArgument,
        "{h}x{w} frame is not divisible by scale {}",
        p.scale
    );
    let draw = draw_degradation(p, rng)?;
    Ok(SRPair { lr_cond: apply_degradation(hr, &draw)?, hr: hr.clone(), draw })
}

/// Trains a conditional model to restore `hr` frames from fresh degradations
/// drawn at every step.
pub fn train_sr<F: Real>(
    model: &mut DenoiserModel<F>,
    hr_frames: &[Image],
    p: &DegradeParams,
    codec: &dyn LatentCodec,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> std::result::Result<TrainReport, TrainError> {
    ensure!(model.config().conditional, InvalidArgument, "SR training needs a conditional model");
    ensure!(!hr_frames.is_empty(), InvalidArgument, "no training frames");
    p.validate()?;
    train_with(model, cfg, sched, rng, |rng, _| {
        let mut x0 = Vec::with_capacity(cfg.batch_size);
        let mut cond = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let hr = &hr_frames[rng.random_range(0..hr_frames.len())];
            let pair = degrade(hr, p, rng)?;
            x0.push(codec.encode(&pair.hr)?);
            cond.push(codec.encode(&pair.lr_cond)?);
        }
        Ok((x0, Some(cond)))
    })
}

/// Upsamples `coarse` by `scale` with bicubic resampling and uses it as the
/// condition of a full reverse chain. Output is clamped to `[0, 1]`.
pub fn super_resolve<M: NoisePredictor>(
    model: &M,
    coarse: &Image,
    scale: usize,
    codec: &dyn LatentCodec,
    sched: &SamplingSchedule,
    rng: &mut Rng,
) -> Result<Image> {
    ensure!(scale >= 1, InvalidArgument, "scale must be positive");
    let (_, h, w) = coarse.shape();
    let up = resample_frame(coarse, h * scale, w * scale)?;
    let cond = codec.encode(&up)?;
    let (c, lh, lw) = cond.shape();
    let x = gaussian_image(rng, c, lh, lw);
    let z = reverse_chain(model, sched, x, sched.steps(), Some(&cond), rng, None)?;
    Ok(codec.decode(&z)?.clamp01())
}

/// Super-resolves every frame independently; frame `j` uses its own stream
/// derived from `(seed, j)`.
pub fn refine_frames<M: NoisePredictor + Sync>(
    model: &M,
    frames: &[Image],
    scale: usize,
    codec: &dyn LatentCodec,
    sched: &SamplingSchedule,
    seed: u64,
) -> Result<Vec<Image>> {
    frames
        .par_iter()
        .enumerate()
        .map(|(j, f)| {
            let mut rng = rng_for(seed, &[tags::SR_FRAME, j as u64]);
            super_resolve(model, f, scale, codec, sched, &mut rng)
        })
        .collect()
}

pub fn refine_sequence<M: NoisePredictor + Sync>(
    model: &M,
    coarse: &[Image],
    scale: usize,
    codec: &dyn LatentCodec,
    sched: &SamplingSchedule,
    seed: u64,
) -> Result<Sequence> {
    ensure!(!coarse.is_empty(), InvalidArgument, "nothing to refine");
    Sequence::new(refine_frames(model, coarse, scale, codec, sched, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_sigma_convention() {
        assert!((blur_sigma(9) - 1.7).abs() < 1e-12);
        assert!((blur_sigma(15) - 2.6).abs() < 1e-12);
        assert!((blur_sigma(3) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect101(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn null_degradation_is_identity() {
        let hr = Image::from_fn(3, 8, 8, |c, y, x| ((c + y * 8 + x) % 13) as f32 / 12.0);
        let mut rng = rng_for(1, &[]);
        let pair = degrade(&hr, &DegradeParams::null(), &mut rng).unwrap();
        assert_eq!(pair.lr_cond, hr);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::filled(1, 9, 7, 0.25);
        let b = gaussian_blur(&img, 15);
        assert!(b.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }
}
