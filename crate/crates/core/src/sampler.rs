//! Grid sampling: vanilla DDPM sampling of one grid, autoregressive extension
//! with row-masked inpainting (step 1), temporal interpolation between
//! consecutive step-1 grids (step 2), and assembly of the coarse sequence.

use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::diffusion::{noise_with, reverse_step, NoisePredictor, SamplingSchedule};
use crate::error::{ensure, Result};
use crate::image::{Image, Sequence};
use crate::rng::{gaussian_image, rng_for, tags, Rng};
use crate::seqgrid::{compose_rows, make_masks, row_shift, unpack_image, GridLayout, MaskMode, MaskSet};

/// Noise level used for the control grids at chain step `i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlNoising {
    /// `ᾱ` of the level being produced (`i - 1`); with `ᾱ_0 = 1` the final
    /// control rows are exact copies.
    #[default]
    TargetLevel,
    /// `ᾱ` of the current level `i`, as written in the step-1 update line.
    CurrentLevel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerPlan {
    /// Pixel-space grid layout; `control_rows` is `r`.
    pub layout: GridLayout,
    /// Channels of a pixel-space grid.
    pub channels: usize,
    /// Step-1 grids to produce, counting the initial one.
    pub iterations: usize,
    pub sched: SamplingSchedule,
    pub seed: u64,
    pub interpolate: bool,
    pub control_noising: ControlNoising,
}

impl SamplerPlan {
    pub fn validate(&self) -> Result<()> {
        let (k, r) = (self.layout.k, self.layout.control_rows);
        ensure!(self.iterations >= 1, InvalidArgument, "N must be at least 1");
        ensure!(self.sched.steps() >= 1, InvalidArgument, "empty sampling schedule");
        if self.iterations > 1 {
            ensure!(r > 0 && r < k, InvalidArgument, "autoregressive sampling needs 0 < r < K, got r={r}, K={k}");
        }
        if self.interpolate {
            ensure!(k >= 3, InvalidArgument, "interpolation needs K >= 3, got K={k}");
        }
        Ok(())
    }

    /// New frames contributed by each step-1 grid after the first.
    pub fn new_frames_per_iteration(&self) -> usize {
        let k = self.layout.k;
        (k - self.layout.control_rows) * k
    }

    /// Interpolated frames contributed by each step-2 grid.
    pub fn interp_frames_per_pair(&self) -> usize {
        let k = self.layout.k;
        if self.interpolate {
            (k - 2) * k
        } else {
            0
        }
    }

    /// Length of the assembled sequence.
    pub fn expected_length(&self) -> usize {
        let extra = self.new_frames_per_iteration() + self.interp_frames_per_pair();
        self.layout.elements() + (self.iterations - 1) * extra
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameTag {
    /// Element `index` of the initial grid.
    Initial { index: usize },
    /// Element `index` of step-1 grid `iteration`.
    New { iteration: usize, index: usize },
    /// Element `index` of the step-2 grid between step-1 grids `pair` and `pair + 1`.
    Interp { pair: usize, index: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseSequence {
    pub frames: Vec<Image>,
    pub provenance: Vec<FrameTag>,
}

impl CoarseSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn to_sequence(&self) -> Result<Sequence> {
        Sequence::new(self.frames.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    FirstGrid,
    Step1 { iteration: usize },
    Step2 { pair: usize },
    Chain,
}

/// Observer called after every reverse step with the recombined sample. It may
/// modify the sample in place.
pub type StepHook<'h> = &'h mut dyn FnMut(Phase, usize, &mut Image);

fn call(hook: &mut Option<StepHook<'_>>, phase: Phase, i: usize, x: &mut Image) {
    if let Some(h) = hook.as_mut() {
        h(phase, i, x);
    }
}

fn predict_one<M: NoisePredictor>(model: &M, x: &Image, t: usize, cond: Option<&Image>) -> Result<Image> {
    let cond = cond.map(std::slice::from_ref);
    let mut out = model.predict(std::slice::from_ref(x), &[t], cond)?;
    Ok(out.remove(0))
}

/// Runs reverse steps `from, from-1, …, 1` starting at `x`. Fresh noise for
/// step `i > 1` is drawn from `rng` before the model is evaluated.
pub fn reverse_chain<M: NoisePredictor>(
    model: &M,
    sched: &SamplingSchedule,
    mut x: Image,
    from: usize,
    cond: Option<&Image>,
    rng: &mut Rng,
    mut hook: Option<StepHook<'_>>,
) -> Result<Image> {
    ensure!(from <= sched.steps(), InvalidArgument, "chain start {from} beyond T_s={}", sched.steps());
    let (c, h, w) = x.shape();
    for i in (1..=from).rev() {
        let eps = (i > 1).then(|| gaussian_image(rng, c, h, w));
        let eps_pred = predict_one(model, &x, sched.timesteps[i - 1], cond)?;
        x = reverse_step(&x, i, &eps_pred, eps.as_ref(), sched)?;
        call(&mut hook, Phase::Chain, i, &mut x);
        x.ensure_finite("reverse chain state")?;
    }
    Ok(x)
}

/// Standard ancestral sampling of one image from unit Gaussian noise.
pub fn sample_grid<M: NoisePredictor>(
    model: &M,
    sched: &SamplingSchedule,
    shape: (usize, usize, usize),
    rng: &mut Rng,
) -> Result<Image> {
    let x = gaussian_image(rng, shape.0, shape.1, shape.2);
    reverse_chain(model, sched, x, sched.steps(), None, rng, None)
}

/// Drives the full pipeline for one model, codec and plan. Sampling runs in
/// the codec's latent space; masks and row shifts act on latent element rows.
pub struct Sampler<'a, M> {
    model: &'a M,
    codec: &'a dyn LatentCodec,
    plan: SamplerPlan,
    latent: GridLayout,
    shape: (usize, usize, usize),
}

impl<'a, M: NoisePredictor> Sampler<'a, M> {
    pub fn new(model: &'a M, codec: &'a dyn LatentCodec, plan: SamplerPlan) -> Result<Self> {
        plan.validate()?;
        let latent = plan.layout.scaled_down(codec.spatial_factor())?;
        let shape = (codec.latent_channels(plan.channels), latent.grid_h(), latent.grid_w());
        Ok(Self { model, codec, plan, latent, shape })
    }

    pub fn plan(&self) -> &SamplerPlan {
        &self.plan
    }

    pub fn latent_layout(&self) -> &GridLayout {
        &self.latent
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    fn control_alpha_bar(&self, i: usize) -> f64 {
        match self.plan.control_noising {
            ControlNoising::TargetLevel => self.plan.sched.alpha_bar_at(i - 1),
            ControlNoising::CurrentLevel => self.plan.sched.alpha_bar_at(i),
        }
    }

    /// The initial grid, sampled from its own stream.
    pub fn first_grid(&self, hook: Option<StepHook<'_>>) -> Result<Image> {
        let mut rng = rng_for(self.plan.seed, &[tags::FIRST_GRID]);
        let (c, h, w) = self.shape;
        let x = gaussian_image(&mut rng, c, h, w);
        let mut hook = hook;
        let mut relabel = |_: Phase, i: usize, x: &mut Image| call(&mut hook, Phase::FirstGrid, i, x);
        reverse_chain(self.model, &self.plan.sched, x, self.plan.sched.steps(), None, &mut rng, Some(&mut relabel))
    }

    /// Step 1: returns `N` grids starting with `first`. Grid `n ≥ 1` is sampled
    /// with the last `r` rows of grid `n-1`, noised and shifted to the top,
    /// substituted into the first `r` rows after every reverse step.
    pub fn ar_step1(&self, first: Image, mut hook: Option<StepHook<'_>>) -> Result<Vec<Image>> {
        ensure!(
            first.shape() == self.shape,
            Shape,
            "initial grid has shape {:?}, expected {:?}",
            first.shape(),
            self.shape
        );
        let mut grids = vec![first];
        if self.plan.iterations == 1 {
            return Ok(grids);
        }
        let mask = match make_masks(&self.latent, MaskMode::Step1)? {
            MaskSet::Step1(m) => m,
            MaskSet::Step2 { .. } => unreachable!("step-1 mask mode"),
        };
        let sched = &self.plan.sched;
        let (c, h, w) = self.shape;
        for n in 1..self.plan.iterations {
            let mut rng = rng_for(self.plan.seed, &[tags::STEP1, n as u64]);
            let prev = grids[n - 1].clone();
            let mut x = gaussian_image(&mut rng, c, h, w);
            for i in (1..=sched.steps()).rev() {
                let eps = (i > 1).then(|| gaussian_image(&mut rng, c, h, w));
                let control = noise_with(&prev, eps.as_ref(), self.control_alpha_bar(i))?;
                let control = row_shift(&control, &self.latent)?;
                let eps_pred = predict_one(self.model, &x, sched.timesteps[i - 1], None)?;
                let stepped = reverse_step(&x, i, &eps_pred, eps.as_ref(), sched)?;
                x = mask.blend(&control, &stepped, &self.latent)?;
                call(&mut hook, Phase::Step1 { iteration: n }, i, &mut x);
                x.ensure_finite("step-1 sample")?;
            }
            grids.push(x);
        }
        Ok(grids)
    }

    /// Step 2: for every consecutive pair of step-1 grids, samples a grid whose
    /// first row is the last row of the earlier grid and whose last row is the
    /// last row of the later grid.
    pub fn interp_step2(&self, grids: &[Image], mut hook: Option<StepHook<'_>>) -> Result<Vec<Image>> {
        ensure!(grids.len() >= 2, InvalidArgument, "interpolation needs at least two step-1 grids");
        let one_row = self.latent.with_control_rows(1)?;
        let (prev_m, cur_m, next_m) = match make_masks(&one_row, MaskMode::Step2)? {
            MaskSet::Step2 { prev, current, next } => (prev, current, next),
            MaskSet::Step1(_) => unreachable!("step-2 mask mode"),
        };
        let sched = &self.plan.sched;
        let (c, h, w) = self.shape;
        let mut out = Vec::with_capacity(grids.len() - 1);
        for (pair, win) in grids.windows(2).enumerate() {
            for g in win {
                ensure!(
                    g.shape() == self.shape,
                    Shape,
                    "step-1 grid has shape {:?}, expected {:?}",
                    g.shape(),
                    self.shape
                );
            }
            let mut rng = rng_for(self.plan.seed, &[tags::STEP2, pair as u64]);
            let mut x = gaussian_image(&mut rng, c, h, w);
            for i in (1..=sched.steps()).rev() {
                let eps = (i > 1).then(|| gaussian_image(&mut rng, c, h, w));
                let ab = self.control_alpha_bar(i);
                let prev = row_shift(&noise_with(&win[0], eps.as_ref(), ab)?, &one_row)?;
                let next = noise_with(&win[1], eps.as_ref(), ab)?;
                let eps_pred = predict_one(self.model, &x, sched.timesteps[i - 1], None)?;
                let stepped = reverse_step(&x, i, &eps_pred, eps.as_ref(), sched)?;
                x = compose_rows(&[(&prev_m, &prev), (&cur_m, &stepped), (&next_m, &next)], &one_row)?;
                call(&mut hook, Phase::Step2 { pair }, i, &mut x);
                x.ensure_finite("step-2 sample")?;
            }
            out.push(x);
        }
        Ok(out)
    }

    /// Decodes the grids and orders their unique elements in time.
    pub fn assemble(&self, step1: &[Image], step2: &[Image]) -> Result<CoarseSequence> {
        assemble_sequence(step1, step2, &self.plan, self.codec)
    }

    pub fn generate(&self) -> Result<CoarseSequence> {
        let first = self.first_grid(None)?;
        let step1 = self.ar_step1(first, None)?;
        let step2 =
            if self.plan.interpolate && step1.len() >= 2 { self.interp_step2(&step1, None)? } else { Vec::new() };
        self.assemble(&step1, &step2)
    }
}

/// Orders the unique frames of step-1 and step-2 grids: all elements of grid 0,
/// then for each later grid `n` the middle rows of interpolation grid `n-1`
/// followed by the rows of grid `n` that are not control copies.
pub fn assemble_sequence(
    step1: &[Image],
    step2: &[Image],
    plan: &SamplerPlan,
    codec: &dyn LatentCodec,
) -> Result<CoarseSequence> {
    plan.validate()?;
    let k = plan.layout.k;
    let r = plan.layout.control_rows;
    ensure!(
        step1.len() == plan.iterations,
        InvalidArgument,
        "plan has N={} but {} step-1 grids were given",
        plan.iterations,
        step1.len()
    );
    let want2 = if plan.interpolate { plan.iterations - 1 } else { 0 };
    ensure!(step2.len() == want2, InvalidArgument, "expected {want2} interpolation grids, got {}", step2.len());
    let split = |g: &Image| -> Result<Vec<Image>> { unpack_image(&codec.decode(g)?, k) };

    let mut frames = Vec::with_capacity(plan.expected_length());
    let mut provenance = Vec::with_capacity(plan.expected_length());
    for (index, f) in split(&step1[0])?.into_iter().enumerate() {
        frames.push(f);
        provenance.push(FrameTag::Initial { index });
    }
    for (n, grid) in step1.iter().enumerate().skip(1) {
        if plan.interpolate {
            let elems = split(&step2[n - 1])?;
            for (index, f) in elems.into_iter().enumerate().take((k - 1) * k).skip(k) {
                frames.push(f);
                provenance.push(FrameTag::Interp { pair: n - 1, index });
            }
        }
        for (index, f) in split(grid)?.into_iter().enumerate().skip(r * k) {
            frames.push(f);
            provenance.push(FrameTag::New { iteration: n, index });
        }
    }
    Ok(CoarseSequence { frames, provenance })
}

/// Samples a complete coarse sequence for `plan`.
pub fn generate_sequence<M: NoisePredictor>(
    model: &M,
    codec: &dyn LatentCodec,
    plan: SamplerPlan,
) -> Result<CoarseSequence> {
    Sampler::new(model, codec, plan)?.generate()
}
