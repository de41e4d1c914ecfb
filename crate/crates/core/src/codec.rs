//! Encoders between pixel space and the space the denoiser operates in.

use crate::error::{ensure, Result};
use crate::image::Image;

pub trait LatentCodec: Send + Sync {
    /// How many pixels along each axis map to one latent position.
    fn spatial_factor(&self) -> usize;
    fn latent_channels(&self, pixel_channels: usize) -> usize;
    fn encode(&self, x: &Image) -> Result<Image>;
    fn decode(&self, z: &Image) -> Result<Image>;
}

/// Pixel-space diffusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn spatial_factor(&self) -> usize {
        1
    }
    fn latent_channels(&self, pixel_channels: usize) -> usize {
        pixel_channels
    }
    fn encode(&self, x: &Image) -> Result<Image> {
        Ok(x.clone())
    }
    fn decode(&self, z: &Image) -> Result<Image> {
        Ok(z.clone())
    }
}

/// Lossless space-to-depth: each `f×f` block becomes `f²` channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelUnshuffleCodec {
    pub factor: usize,
}

impl LatentCodec for PixelUnshuffleCodec {
    fn spatial_factor(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self, pixel_channels: usize) -> usize {
        pixel_channels * self.factor * self.factor
    }

    fn encode(&self, x: &Image) -> Result<Image> {
        let f = self.factor;
        let (c, h, w) = x.shape();
        ensure!(f >= 1 && h % f == 0 && w % f == 0, Shape, "{h}x{w} image is not divisible by codec factor {f}");
        let (lh, lw) = (h / f, w / f);
        Ok(Image::from_fn(c * f * f, lh, lw, |lc, y, x0| {
            let (ch, sub) = (lc / (f * f), lc % (f * f));
            x.at(ch, y * f + sub / f, x0 * f + sub % f)
        }))
    }

    fn decode(&self, z: &Image) -> Result<Image> {
        let f = self.factor;
        let (lc, lh, lw) = z.shape();
        ensure!(f >= 1 && lc % (f * f) == 0, Shape, "{lc} latent channels are not a multiple of {}", f * f);
        Ok(Image::from_fn(lc / (f * f), lh * f, lw * f, |ch, y, x| {
            let sub = (y % f) * f + x % f;
            z.at(ch * f * f + sub, y / f, x / f)
        }))
    }
}
