//! Planar `C×H×W` float images and frame sequences.
//!
//! Pixel values live on the `[0,1]` scale; conversion to 8-bit happens only at
//! I/O boundaries.

use crate::error::{ensure, Error, Result};

/// A planar (channel-major) image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            channels >= 1 && height >= 1 && width >= 1,
            Shape,
            "image dimensions must be positive, got {channels}x{height}x{width}"
        );
        ensure!(
            data.len() == channels * height * width,
            Shape,
            "buffer of {} values does not match {channels}x{height}x{width}",
            data.len()
        );
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        assert!(channels >= 1 && height >= 1 && width >= 1);
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut img = Self::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    img.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        img
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        ensure!(self.same_shape(other), Shape, "{what}: {:?} vs {:?}", self.shape(), other.shape());
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    /// Elementwise combination of two equally shaped images.
    pub fn zip_map(&self, other: &Image, f: impl Fn(f32, f32) -> f32) -> Result<Image> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Image { data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(), ..*self })
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        debug_assert!(self.same_shape(other));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Replicates a single-channel image to three channels; other images are
    /// returned unchanged.
    pub fn to_rgb(&self) -> Image {
        if self.channels != 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(3 * self.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Image { channels: 3, data, ..*self }
    }

    /// Averages channels into a single gray plane.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let inv = 1.0 / self.channels as f64;
        let data = (0..n)
            .map(|i| {
                let s: f64 = (0..self.channels).map(|c| self.data[c * n + i] as f64).sum();
                (s * inv) as f32
            })
            .collect();
        Image { channels: 1, data, ..*self }
    }

    /// Copies the pixel rows `[y0, y0+h)` and columns `[x0, x0+w)` of every channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        ensure!(
            y0 + h <= self.height && x0 + w <= self.width && h > 0 && w > 0,
            Shape,
            "crop ({y0},{x0},{h},{w}) outside {}x{}",
            self.height,
            self.width
        );
        let mut out = Image::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                let src = (c * self.height + y0 + y) * self.width + x0;
                let dst = (c * h + y) * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(out)
    }

    /// Writes `src` into this image with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, src: &Image, y0: usize, x0: usize) -> Result<()> {
        ensure!(
            src.channels == self.channels && y0 + src.height <= self.height && x0 + src.width <= self.width,
            Shape,
            "paste of {:?} at ({y0},{x0}) into {:?}",
            src.shape(),
            self.shape()
        );
        for c in 0..self.channels {
            for y in 0..src.height {
                let dst = (c * self.height + y0 + y) * self.width + x0;
                let s = (c * src.height + y) * src.width;
                self.data[dst..dst + src.width].copy_from_slice(&src.data[s..s + src.width]);
            }
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for Image {
    type Output = f32;
    fn index(&self, i: usize) -> &f32 {
        &self.data[i]
    }
}

/// An ordered stack of frames sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    frames: Vec<Image>,
    pub frame_rate_hint: Option<f64>,
}

impl Sequence {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        ensure!(!frames.is_empty(), InvalidArgument, "a sequence needs at least one frame");
        let (c, _, _) = frames[0].shape();
        ensure!(c == 1 || c == 3, Shape, "frames must have 1 or 3 channels, got {c}");
        for (i, f) in frames.iter().enumerate() {
            ensure!(
                f.same_shape(&frames[0]),
                Shape,
                "frame {i} has shape {:?}, expected {:?}",
                f.shape(),
                frames[0].shape()
            );
            if !f.is_finite() {
                return Err(Error::NonFinite(format!("frame {i}")));
            }
        }
        Ok(Self { frames, frame_rate_hint: None })
    }

    pub fn with_frame_rate(mut self, hint: f64) -> Result<Self> {
        ensure!(hint > 0.0 && hint.is_finite(), InvalidArgument, "frame rate must be positive");
        self.frame_rate_hint = Some(hint);
        Ok(self)
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }
    pub fn into_frames(self) -> Vec<Image> {
        self.frames
    }
    pub fn len(&self) -> usize {
        self.frames.len()
    }
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
    pub fn frame_shape(&self) -> (usize, usize, usize) {
        self.frames[0].shape()
    }
}

impl std::ops::Index<usize> for Sequence {
    type Output = Image;
    fn index(&self, i: usize) -> &Image {
        &self.frames[i]
    }
}
