#![allow(dead_code)]

use gridit::diffusion::{NoisePredictor, NoiseSchedule};
use gridit::{Image, Result};

/// Predicts zero noise everywhere.
pub struct ZeroModel;

impl NoisePredictor for ZeroModel {
    type Grad = ();

    fn predict(&self, x_t: &[Image], _t: &[usize], _cond: Option<&[Image]>) -> Result<Vec<Image>> {
        Ok(x_t.iter().map(|x| x.map(|_| 0.0)).collect())
    }

    fn mse_and_grad(&self, _x: &[Image], _t: &[usize], _c: Option<&[Image]>, _y: &[Image]) -> Result<(f64, ())> {
        unimplemented!("not trainable")
    }
}

/// Knows the clean image and returns the exact noise `(x_t - √ᾱ x0)/√(1-ᾱ)`.
pub struct OracleModel {
    pub x0: Image,
    pub sched: NoiseSchedule,
}

impl NoisePredictor for OracleModel {
    type Grad = ();

    fn predict(&self, x_t: &[Image], t: &[usize], _cond: Option<&[Image]>) -> Result<Vec<Image>> {
        x_t.iter()
            .zip(t)
            .map(|(x, &t)| {
                let ab = self.sched.alpha_bar_at(t);
                x.zip_map(&self.x0, |v, c| ((v as f64 - ab.sqrt() * c as f64) / (1.0 - ab).sqrt()) as f32)
            })
            .collect()
    }

    fn mse_and_grad(&self, _x: &[Image], _t: &[usize], _c: Option<&[Image]>, _y: &[Image]) -> Result<(f64, ())> {
        unimplemented!("not trainable")
    }
}

/// A fixed nonlinear function of the input and timestep, to exercise paths
/// where the prediction depends on the sample.
pub struct WobbleModel;

impl NoisePredictor for WobbleModel {
    type Grad = ();

    fn predict(&self, x_t: &[Image], t: &[usize], _cond: Option<&[Image]>) -> Result<Vec<Image>> {
        Ok(x_t.iter().zip(t).map(|(x, &t)| x.map(|v| 0.3 * (v * (1.0 + t as f32 * 1e-3)).sin())).collect())
    }

    fn mse_and_grad(&self, _x: &[Image], _t: &[usize], _c: Option<&[Image]>, _y: &[Image]) -> Result<(f64, ())> {
        unimplemented!("not trainable")
    }
}
