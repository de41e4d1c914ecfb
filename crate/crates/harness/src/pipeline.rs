//! The stages of a run, shared by the CLI and the acceptance suite.

use gridit::codec::IdentityCodec;
use gridit::denoiser::{train, DenoiserModel, TrainReport};
use gridit::diffusion::SamplingSchedule;
use gridit::eval::{flicker, proxy_fd, psnr_frames, ssim};
use gridit::rng::{gaussian_image, rng_for, tags};
use gridit::sampler::{generate_sequence, sample_grid, CoarseSequence};
use gridit::seqgrid::{extract_training_grids, GridLayout};
use gridit::sr_stage::{refine_sequence, train_sr};
use gridit::voldenoise::{denoise_volume, NoisyVolume, Refiner};
use gridit::{Image, Sequence};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

/// Stream path suffix for each stage's initialization and training.
pub const STAGE1: u64 = 1;
pub const STAGE2: u64 = 2;

/// Every `K²`-frame training grid of every sequence.
pub fn training_grids(seqs: &[Sequence], layout: GridLayout, stride: usize) -> Result<Vec<Image>> {
    let grids: Vec<Vec<Image>> = seqs
        .par_iter()
        .map(|s| Ok(extract_training_grids(s, layout, stride)?.into_iter().map(|g| g.pixels).collect()))
        .collect::<Result<_>>()?;
    Ok(grids.into_iter().flatten().collect())
}

pub fn train_stage1(cfg: &RunConfig, seqs: &[Sequence]) -> Result<(DenoiserModel<f32>, TrainReport)> {
    let grids = training_grids(seqs, cfg.layout()?, cfg.grid_stride)?;
    log::info!("stage 1: {} training grids", grids.len());
    let sched = cfg.noise_schedule()?;
    let mut rng = rng_for(cfg.seed, &[tags::TRAIN, STAGE1, cfg.train_stage1.seed]);
    let mut model = DenoiserModel::new(cfg.stage1.clone(), &mut rng)?;
    let report = train(&mut model, &grids, None, &cfg.train_stage1, &sched, &mut rng)?;
    Ok((model, report))
}

pub fn train_stage2(cfg: &RunConfig, seqs: &[Sequence]) -> Result<(DenoiserModel<f32>, TrainReport)> {
    let size = cfg.stage2.input_size;
    let frames: Vec<Image> = seqs
        .iter()
        .flat_map(|s| s.frames().iter().cloned())
        .filter(|f| f.height() == size && f.width() == size)
        .collect();
    if frames.is_empty() {
        return Err(HarnessError::Usage(format!("no {size}x{size} frames to train the second stage on")));
    }
    let sched = cfg.noise_schedule()?;
    let mut rng = rng_for(cfg.seed, &[tags::TRAIN, STAGE2, cfg.train_stage2.seed]);
    let mut model = DenoiserModel::new(cfg.stage2.clone(), &mut rng)?;
    let report = train_sr(&mut model, &frames, &cfg.sr.degrade, &IdentityCodec, &cfg.train_stage2, &sched, &mut rng)?;
    Ok((model, report))
}

/// Unconditional grid samples on the first-grid streams of seeds
/// `seed, seed+1, …`.
pub fn sample_grids(
    model: &DenoiserModel<f32>,
    sched: &SamplingSchedule,
    count: usize,
    seed: u64,
) -> Result<Vec<Image>> {
    let c = model.config();
    let shape = (c.input_channels, c.input_size, c.input_size);
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed + i, &[tags::FIRST_GRID]);
            Ok(sample_grid(model, sched, shape, &mut rng)?.clamp01())
        })
        .collect()
}

pub fn sample_sequence(cfg: &RunConfig, model: &DenoiserModel<f32>) -> Result<CoarseSequence> {
    Ok(generate_sequence(model, &IdentityCodec, cfg.sampler_plan()?)?)
}

pub fn clamp_sequence(coarse: &CoarseSequence) -> Result<Sequence> {
    Ok(Sequence::new(coarse.frames.iter().map(Image::clamp01).collect())?)
}

pub fn super_resolve_sequence(cfg: &RunConfig, model: &DenoiserModel<f32>, coarse: &Sequence) -> Result<Sequence> {
    let sched = cfg.sampling(cfg.sr.sample_steps)?;
    Ok(refine_sequence(model, coarse.frames(), cfg.sr.scale, &IdentityCodec, &sched, cfg.seed)?)
}

/// Adds Gaussian noise of `std` (0–255 scale) to every frame, clamped to `[0,1]`.
pub fn add_noise(seq: &Sequence, std: f64, seed: u64) -> Result<NoisyVolume> {
    let frames = seq
        .frames()
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let mut rng = rng_for(seed, &[tags::DEGRADE, j as u64]);
            let (c, h, w) = f.shape();
            let n = gaussian_image(&mut rng, c, h, w);
            f.zip_map(&n, |v, e| (v as f64 + std / 255.0 * e as f64).clamp(0.0, 1.0) as f32)
        })
        .collect::<gridit::Result<Vec<_>>>()?;
    Ok(NoisyVolume::new(Sequence::new(frames)?, Some(std)))
}

pub fn denoise(
    cfg: &RunConfig,
    stage1: &DenoiserModel<f32>,
    stage2: Option<&DenoiserModel<f32>>,
    vol: &NoisyVolume,
) -> Result<Sequence> {
    let sched = cfg.sampling(cfg.denoise.sample_steps)?;
    let sr_sched = cfg.sampling(cfg.sr.sample_steps)?;
    let layout = cfg.layout()?;
    let refiner = stage2.map(|m| Refiner { model: m, sched: &sr_sched });
    Ok(denoise_volume(stage1, refiner, vol, &layout, &IdentityCodec, &sched, cfg.denoise.mode, cfg.seed)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Flicker,
    Psnr,
    Ssim,
    ProxyFd,
}

/// Evaluates `metric` on `input` (against `reference` where needed). Returns
/// the value and the number of items it was computed over.
pub fn evaluate(metric: Metric, input: &[Sequence], reference: Option<&[Sequence]>) -> Result<(f64, usize)> {
    let need_ref = || reference.ok_or_else(|| HarnessError::Usage(format!("metric {metric:?} needs --reference")));
    let frames = |s: &[Sequence]| -> Vec<Image> { s.iter().flat_map(|q| q.frames().iter().cloned()).collect() };
    match metric {
        Metric::Flicker => {
            let vals = input.iter().map(flicker).collect::<gridit::Result<Vec<f64>>>()?;
            Ok((vals.iter().sum::<f64>() / vals.len() as f64, vals.len()))
        }
        Metric::Psnr | Metric::Ssim => {
            let (a, b) = (frames(input), frames(need_ref()?));
            if a.len() != b.len() {
                return Err(HarnessError::Usage(format!("{} frames vs {} reference frames", a.len(), b.len())));
            }
            let v = if metric == Metric::Psnr {
                psnr_frames(&a, &b)?
            } else {
                let s = a.iter().zip(&b).map(|(x, y)| ssim(x, y)).collect::<gridit::Result<Vec<f64>>>()?;
                s.iter().sum::<f64>() / s.len() as f64
            };
            Ok((v, a.len()))
        }
        Metric::ProxyFd => {
            let (a, b) = (frames(input), frames(need_ref()?));
            Ok((proxy_fd(&a, &b)?, a.len()))
        }
    }
}
