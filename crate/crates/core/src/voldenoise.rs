//! Denoising of a noisy frame volume with the grid model.
//!
//! The volume is cut into consecutive windows of `K²` frames (the last window
//! is aligned to the end of the volume and may overlap its predecessor), each
//! window is packed into a grid and denoised on its own stream, and the frames
//! are put back in their original order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::diffusion::{apply_reverse, noise_with, NoisePredictor, SamplingSchedule};
use crate::error::{ensure, Result};
use crate::image::{Image, Sequence};
use crate::rng::{gaussian_image, rng_for, tags, Rng};
use crate::sampler::reverse_chain;
use crate::seqgrid::{pack_grid, resample_frame, unpack_image, GridLayout};
use crate::sr_stage::refine_frames;

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyVolume {
    pub frames: Sequence,
    /// Noise std on the 0–255 scale, when known.
    pub assumed_noise_std: Option<f64>,
}

impl NoisyVolume {
    pub fn new(frames: Sequence, assumed_noise_std: Option<f64>) -> Self {
        Self { frames, assumed_noise_std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DenoiseMode {
    /// At every chain step `t = T_s, …, 1`, re-noise the noisy input to level
    /// `t+1` and take one reverse step from it; return the last result.
    Literal,
    /// Noise the input once to training timestep `t_star` (rounded down to the
    /// sampling chain) and run the reverse chain from there.
    Sdedit { t_star: usize },
}

pub const DEFAULT_T_STAR: usize = 100;

impl Default for DenoiseMode {
    fn default() -> Self {
        Self::Sdedit { t_star: DEFAULT_T_STAR }
    }
}

/// Denoises one grid tensor.
pub fn denoise_grid<M: NoisePredictor>(
    model: &M,
    x: &Image,
    sched: &SamplingSchedule,
    mode: DenoiseMode,
    rng: &mut Rng,
) -> Result<Image> {
    let (c, h, w) = x.shape();
    match mode {
        DenoiseMode::Sdedit { t_star } => {
            let t_max = *sched.timesteps.last().expect("non-empty schedule");
            ensure!(t_star >= 1 && t_star <= t_max, InvalidArgument, "t* = {t_star} outside [1, {t_max}]");
            let start = sched.step_at_or_below(t_star);
            if start == 0 {
                return Ok(x.clone());
            }
            let eps = gaussian_image(rng, c, h, w);
            let xt = noise_with(x, Some(&eps), sched.alpha_bar_at(start))?;
            reverse_chain(model, sched, xt, start, None, rng, None)
        }
        DenoiseMode::Literal => {
            let n = sched.steps();
            let mut out = x.clone();
            for i in (1..=n).rev() {
                let eps = (i > 1).then(|| gaussian_image(rng, c, h, w));
                // beyond the end of the chain the last level is reused
                let ab = sched.alpha_bar_at((i + 1).min(n));
                let xt = noise_with(x, eps.as_ref(), ab)?;
                let cond: Option<&[Image]> = None;
                let pred = model.predict(std::slice::from_ref(&xt), &[sched.timesteps[i - 1]], cond)?.remove(0);
                out = apply_reverse(&xt, &pred, if i == 1 { None } else { eps.as_ref() }, &sched.coefs(i))?;
                out.ensure_finite("denoised grid")?;
            }
            Ok(out)
        }
    }
}

/// Start indices of the `K²`-frame windows covering `len` frames.
pub fn window_starts(len: usize, per_grid: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..len / per_grid).map(|g| g * per_grid).collect();
    if len % per_grid != 0 {
        starts.push(len - per_grid);
    }
    starts
}

/// Optional second stage used to bring denoised elements back to frame size.
pub struct Refiner<'a, M> {
    pub model: &'a M,
    pub sched: &'a SamplingSchedule,
}

#[allow(clippy::too_many_arguments)]
pub fn denoise_volume<M1, M2>(
    stage1: &M1,
    stage2: Option<Refiner<'_, M2>>,
    vol: &NoisyVolume,
    layout: &GridLayout,
    codec: &dyn LatentCodec,
    sched: &SamplingSchedule,
    mode: DenoiseMode,
    seed: u64,
) -> Result<Sequence>
where
    M1: NoisePredictor + Sync,
    M2: NoisePredictor + Sync,
{
    let frames = vol.frames.frames();
    let per_grid = layout.elements();
    ensure!(
        frames.len() >= per_grid,
        InvalidArgument,
        "volume of {} frames is shorter than one grid of {per_grid}",
        frames.len()
    );
    let (_, fh, fw) = vol.frames.frame_shape();
    let (eh, ew) = (layout.element_h, layout.element_w);
    ensure!(
        fh % eh == 0 && fw % ew == 0 && fh / eh == fw / ew,
        InvalidArgument,
        "frames of {fh}x{fw} are not a uniform multiple of the {eh}x{ew} grid elements"
    );
    let scale = fh / eh;
    let small: Vec<Image> = frames.iter().map(|f| resample_frame(f, eh, ew)).collect::<Result<_>>()?;
    let gray = frames[0].channels() == 1;

    let starts = window_starts(frames.len(), per_grid);
    let grids: Vec<Vec<Image>> = starts
        .par_iter()
        .enumerate()
        .map(|(g, &s)| {
            let grid = pack_grid(&small[s..s + per_grid], *layout, s)?;
            let z = codec.encode(&grid.pixels)?;
            let mut rng = rng_for(seed, &[tags::DENOISE_GRID, g as u64]);
            let out = codec.decode(&denoise_grid(stage1, &z, sched, mode, &mut rng)?)?;
            let elems = unpack_image(&out, layout.k)?;
            Ok(if gray { elems.iter().map(Image::to_gray).collect() } else { elems })
        })
        .collect::<Result<_>>()?;

    let mut denoised: Vec<Option<Image>> = vec![None; frames.len()];
    for (&s, elems) in starts.iter().zip(grids) {
        for (j, e) in elems.into_iter().enumerate() {
            denoised[s + j].get_or_insert(e);
        }
    }
    let denoised: Vec<Image> = denoised.into_iter().map(|f| f.expect("every frame covered")).collect();

    let out = match stage2 {
        Some(r) => refine_frames(r.model, &denoised, scale, codec, r.sched, seed)?,
        None if scale == 1 => denoised,
        None => denoised.iter().map(|f| resample_frame(f, fh, fw)).collect::<Result<_>>()?,
    };
    Sequence::new(out)
}
