//! Run configuration, read from JSON. Missing fields take the defaults below:
//! 64×64 frames, `K = 4` so elements are 16×16 and grids 64×64, `T_s = 250`,
//! and a ×4 second stage back to 64×64.

use gridit::denoiser::{DenoiserConfig, TrainConfig};
use gridit::diffusion::{build_schedule_with, respace, NoiseSchedule, SamplingSchedule, ScheduleParams};
use gridit::sampler::{ControlNoising, SamplerPlan};
use gridit::seqgrid::GridLayout;
use gridit::sr_stage::DegradeParams;
use gridit::voldenoise::DenoiseMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::SynthSpec;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub k: usize,
    pub control_rows: usize,
    pub iterations: usize,
    pub sample_steps: usize,
    pub interpolate: bool,
    pub control_noising: ControlNoising,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            k: 4,
            control_rows: 3,
            iterations: 3,
            sample_steps: 250,
            interpolate: true,
            control_noising: ControlNoising::TargetLevel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrConfig {
    pub scale: usize,
    pub sample_steps: usize,
    pub degrade: DegradeParams,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self { scale: 4, sample_steps: 250, degrade: DegradeParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseConfig {
    pub mode: DenoiseMode,
    pub sample_steps: usize,
    /// Noise std on the 0–255 scale added by the `denoise` command's
    /// synthetic-volume path.
    pub noise_std: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self { mode: DenoiseMode::default(), sample_steps: 250, noise_std: 25.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: SynthSpec,
    pub schedule: ScheduleParams,
    pub stage1: DenoiserConfig,
    pub stage2: DenoiserConfig,
    pub train_stage1: TrainConfig,
    pub train_stage2: TrainConfig,
    /// Frame stride between consecutive training grids of one sequence.
    pub grid_stride: usize,
    pub plan: PlanConfig,
    pub sr: SrConfig,
    pub denoise: DenoiseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: SynthSpec::default(),
            schedule: ScheduleParams::default(),
            stage1: DenoiserConfig::default(),
            stage2: DenoiserConfig { patch: 4, conditional: true, ..DenoiserConfig::default() },
            train_stage1: TrainConfig::default(),
            train_stage2: TrainConfig::default(),
            grid_stride: 4,
            plan: PlanConfig::default(),
            sr: SrConfig::default(),
            denoise: DenoiseConfig::default(),
        }
    }
}

fn usage<T>(msg: String) -> Result<T> {
    Err(HarnessError::Usage(msg))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let wrap = |r: gridit::Result<()>, what: &str| r.map_err(|e| HarnessError::Usage(format!("{what}: {e}")));
        self.dataset.validate()?;
        wrap(self.stage1.validate(), "stage1")?;
        wrap(self.stage2.validate(), "stage2")?;
        wrap(self.train_stage1.validate(), "train_stage1")?;
        wrap(self.train_stage2.validate(), "train_stage2")?;
        wrap(self.sr.degrade.validate(), "sr.degrade")?;
        let (h, w) = (self.dataset.height, self.dataset.width);
        if h != w {
            return usage(format!("frames must be square, got {h}x{w}"));
        }
        let layout = self.layout()?;
        if self.stage1.input_size != layout.grid_h() || self.stage1.grid_k != self.plan.k {
            return usage(format!(
                "stage1 expects {}px grids with K={}, plan gives {}px grids with K={}",
                self.stage1.input_size,
                self.stage1.grid_k,
                layout.grid_h(),
                self.plan.k
            ));
        }
        if self.stage1.conditional {
            return usage("stage1 must be unconditional".into());
        }
        if !self.stage2.conditional {
            return usage("stage2 must be conditional".into());
        }
        if layout.element_h * self.sr.scale != self.stage2.input_size {
            return usage(format!(
                "stage2 works on {}px frames, but {}px elements times scale {} is {}",
                self.stage2.input_size,
                layout.element_h,
                self.sr.scale,
                layout.element_h * self.sr.scale
            ));
        }
        if self.grid_stride == 0 {
            return usage("grid_stride must be positive".into());
        }
        for (name, s) in [
            ("plan.sample_steps", self.plan.sample_steps),
            ("sr.sample_steps", self.sr.sample_steps),
            ("denoise.sample_steps", self.denoise.sample_steps),
        ] {
            if s == 0 || s > self.schedule.steps {
                return usage(format!("{name} = {s} outside [1, {}]", self.schedule.steps));
            }
        }
        wrap(self.sampler_plan()?.validate(), "plan")?;
        Ok(())
    }

    pub fn layout(&self) -> Result<GridLayout> {
        GridLayout::for_frames(self.plan.k, self.plan.control_rows, self.dataset.height, self.dataset.width)
            .map_err(|e| HarnessError::Usage(format!("plan: {e}")))
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        build_schedule_with(self.schedule).map_err(|e| HarnessError::Usage(format!("schedule: {e}")))
    }

    pub fn sampling(&self, steps: usize) -> Result<SamplingSchedule> {
        respace(&self.noise_schedule()?, steps).map_err(|e| HarnessError::Usage(format!("schedule: {e}")))
    }

    pub fn sampler_plan(&self) -> Result<SamplerPlan> {
        Ok(SamplerPlan {
            layout: self.layout()?,
            channels: self.stage1.input_channels,
            iterations: self.plan.iterations,
            sched: self.sampling(self.plan.sample_steps)?,
            seed: self.seed,
            interpolate: self.plan.interpolate,
            control_noising: self.plan.control_noising,
        })
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let l = c.layout().unwrap();
        assert_eq!((l.element_h, l.grid_h()), (16, 64));
        assert_eq!(c.plan.sample_steps, 250);
    }

    #[test]
    fn json_round_trip_keeps_digest() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 5, "plan": {"iterations": 2}}"#).unwrap();
        assert_eq!(partial.plan.k, 4);
        assert_ne!(partial.digest(), c.digest());
    }

    #[test]
    fn mismatched_stage_sizes_are_usage_errors() {
        let mut c = RunConfig::default();
        c.stage1.input_size = 32;
        assert!(matches!(c.validate(), Err(HarnessError::Usage(_))));
        let mut c = RunConfig::default();
        c.sr.scale = 2;
        assert!(matches!(c.validate(), Err(HarnessError::Usage(_))));
    }
}
