//! Synthetic sequence generators.
//!
//! `bouncing_shapes` moves anti-aliased discs and squares at constant speed
//! inside the frame, reflecting elastically at the walls, over a dark vertical
//! gradient. `drifting_gradient` translates a smooth cloud field over a sky
//! gradient. Sequence `s` draws from the stream `(seed, DATASET, s)`, so every
//! pixel is a function of the spec alone.

use gridit::rng::{rng_for, tags, Rng};
use gridit::{Image, Sequence};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    BouncingShapes,
    DriftingGradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n_sequences: usize,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_shapes: usize,
    /// Speed range in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SynthKind::BouncingShapes,
            n_sequences: 256,
            n_frames: 32,
            height: 64,
            width: 64,
            n_shapes: 2,
            speed_min: 1.0,
            speed_max: 3.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Usage(m));
        if self.n_sequences == 0 || self.n_frames == 0 {
            return bad("dataset needs at least one sequence and one frame".into());
        }
        if self.height < 4 || self.width < 4 {
            return bad(format!("frames of {}x{} are too small", self.height, self.width));
        }
        if self.kind == SynthKind::BouncingShapes && self.n_shapes == 0 {
            return bad("bouncing_shapes needs at least one shape".into());
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max && self.speed_max.is_finite()) {
            return bad(format!("bad speed range [{}, {}]", self.speed_min, self.speed_max));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc,
    Square,
}

#[derive(Clone, Copy, Debug)]
struct Mover {
    shape: Shape,
    radius: f64,
    color: [f32; 3],
    y: f64,
    x: f64,
    vy: f64,
    vx: f64,
}

impl Mover {
    fn coverage(&self, py: f64, px: f64) -> f32 {
        let (dy, dx) = (py - self.y, px - self.x);
        let d = match self.shape {
            Shape::Disc => (dy * dy + dx * dx).sqrt(),
            Shape::Square => dy.abs().max(dx.abs()),
        };
        (self.radius - d + 0.5).clamp(0.0, 1.0) as f32
    }

    fn advance(&mut self, h: f64, w: f64) {
        fn bounce(p: &mut f64, v: &mut f64, lo: f64, hi: f64) {
            *p += *v;
            loop {
                if *p < lo {
                    *p = 2.0 * lo - *p;
                } else if *p > hi {
                    *p = 2.0 * hi - *p;
                } else {
                    break;
                }
                *v = -*v;
            }
        }
        bounce(&mut self.y, &mut self.vy, self.radius, h - self.radius);
        bounce(&mut self.x, &mut self.vx, self.radius, w - self.radius);
    }
}

fn pixel_center(i: usize) -> f64 {
    i as f64 + 0.5
}

fn bouncing(spec: &SynthSpec, rng: &mut Rng) -> Vec<Image> {
    let (h, w) = (spec.height, spec.width);
    let side = h.min(w) as f64;
    let mut movers: Vec<Mover> = (0..spec.n_shapes)
        .map(|_| {
            let radius = rng.random_range(0.1..0.18) * side;
            let speed = if spec.speed_max > spec.speed_min {
                rng.random_range(spec.speed_min..spec.speed_max)
            } else {
                spec.speed_min
            };
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            Mover {
                shape: if rng.random::<bool>() { Shape::Disc } else { Shape::Square },
                radius,
                color: [rng.random_range(0.4..1.0), rng.random_range(0.4..1.0), rng.random_range(0.4..1.0)],
                y: rng.random_range(radius..h as f64 - radius),
                x: rng.random_range(radius..w as f64 - radius),
                vy: speed * angle.sin(),
                vx: speed * angle.cos(),
            }
        })
        .collect();
    let top: [f32; 3] = [rng.random_range(0.0..0.2), rng.random_range(0.0..0.2), rng.random_range(0.0..0.2)];
    let frames = (0..spec.n_frames)
        .map(|_| {
            let mut img = Image::from_fn(3, h, w, |c, y, _| top[c] * (1.0 - 0.5 * y as f32 / h as f32));
            for m in &movers {
                for y in 0..h {
                    for x in 0..w {
                        let a = m.coverage(pixel_center(y), pixel_center(x));
                        if a > 0.0 {
                            for c in 0..3 {
                                let v = img.at(c, y, x);
                                img.set(c, y, x, v + a * (m.color[c] - v));
                            }
                        }
                    }
                }
            }
            movers.iter_mut().for_each(|m| m.advance(h as f64, w as f64));
            img
        })
        .collect();
    frames
}

fn drifting(spec: &SynthSpec, rng: &mut Rng) -> Vec<Image> {
    let (h, w) = (spec.height, spec.width);
    let speed =
        if spec.speed_max > spec.speed_min { rng.random_range(spec.speed_min..spec.speed_max) } else { spec.speed_min };
    let angle = rng.random_range(-0.5..0.5f64);
    let (vy, vx) = (speed * angle.sin(), speed * angle.cos());
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..2.5) * std::f64::consts::TAU / w as f64,
                rng.random_range(0.5..2.5) * std::f64::consts::TAU / h as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.1..0.3),
            )
        })
        .collect();
    let sky_top = [rng.random_range(0.1..0.3f32), rng.random_range(0.3..0.5), rng.random_range(0.6..0.9)];
    let sky_bottom = [0.8f32, 0.85, 0.95];
    (0..spec.n_frames)
        .map(|n| {
            let (oy, ox) = (vy * n as f64, vx * n as f64);
            let cloud: Vec<f32> = (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64 - oy, (i % w) as f64 - ox);
                    let s: f64 = waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin()).sum();
                    (s.max(0.0) * 1.5).min(1.0) as f32
                })
                .collect();
            Image::from_fn(3, h, w, |c, y, x| {
                let g = y as f32 / (h - 1) as f32;
                let sky = sky_top[c] + g * (sky_bottom[c] - sky_top[c]);
                let a = cloud[y * w + x];
                sky + a * (1.0 - sky)
            })
        })
        .collect()
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<Sequence>> {
    spec.validate()?;
    (0..spec.n_sequences)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng_for(spec.seed, &[tags::DATASET, s as u64]);
            let frames = match spec.kind {
                SynthKind::BouncingShapes => bouncing(spec, &mut rng),
                SynthKind::DriftingGradient => drifting(spec, &mut rng),
            };
            Ok(Sequence::new(frames)?)
        })
        .collect()
}

/// Intensity-weighted centroid `(y, x)` of the pixels brighter than
/// `threshold` in channel-mean luminance.
pub fn bright_centroid(frame: &Image, threshold: f32) -> Option<(f64, f64)> {
    let g = frame.to_gray();
    let (_, h, w) = g.shape();
    let (mut sy, mut sx, mut sw) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = g.at(0, y, x);
            if v > threshold {
                let wt = (v - threshold) as f64;
                sy += wt * pixel_center(y);
                sx += wt * pixel_center(x);
                sw += wt;
            }
        }
    }
    (sw > 0.0).then(|| (sy / sw, sx / sw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounce_reflects_inside_bounds() {
        let mut m = Mover { shape: Shape::Disc, radius: 2.0, color: [1.0; 3], y: 3.0, x: 9.0, vy: -2.0, vx: 3.0 };
        m.advance(10.0, 10.0);
        assert_eq!((m.y, m.vy), (3.0, 2.0));
        assert_eq!((m.x, m.vx), (4.0, -3.0));
    }
}
