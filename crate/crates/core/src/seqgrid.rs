//! Sequence ↔ grid-image algebra.
//!
//! A grid image packs `K²` subsampled frames in row-major temporal order:
//! element `(i, j)` holds sequence index `start + i·K + j`. The autoregressive
//! sampler works on whole element rows, so the masks and the row shift here are
//! all defined per element row.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{Image, Sequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    /// Rows (and columns) of elements.
    pub k: usize,
    /// Number of control rows `r` carried between autoregressive iterations.
    pub control_rows: usize,
    pub element_h: usize,
    pub element_w: usize,
}

impl GridLayout {
    pub fn new(k: usize, control_rows: usize, element_h: usize, element_w: usize) -> Result<Self> {
        ensure!(k >= 1, InvalidArgument, "grid size K must be positive");
        ensure!(control_rows <= k, InvalidArgument, "control rows r={control_rows} exceed K={k}");
        ensure!(element_h >= 1 && element_w >= 1, InvalidArgument, "element size must be positive");
        Ok(Self { k, control_rows, element_h, element_w })
    }

    /// Layout for frames of `frame_h×frame_w` subsampled by `K`.
    pub fn for_frames(k: usize, control_rows: usize, frame_h: usize, frame_w: usize) -> Result<Self> {
        ensure!(k >= 1, InvalidArgument, "grid size K must be positive");
        ensure!(
            frame_h % k == 0 && frame_w % k == 0,
            InvalidArgument,
            "frame size {frame_h}x{frame_w} is not divisible by K={k}"
        );
        Self::new(k, control_rows, frame_h / k, frame_w / k)
    }

    pub fn grid_h(&self) -> usize {
        self.k * self.element_h
    }
    pub fn grid_w(&self) -> usize {
        self.k * self.element_w
    }
    pub fn elements(&self) -> usize {
        self.k * self.k
    }

    pub fn with_control_rows(&self, control_rows: usize) -> Result<Self> {
        Self::new(self.k, control_rows, self.element_h, self.element_w)
    }

    /// The same grid seen through a codec that shrinks space by `factor`.
    pub fn scaled_down(&self, factor: usize) -> Result<Self> {
        ensure!(
            factor >= 1 && self.element_h % factor == 0 && self.element_w % factor == 0,
            InvalidArgument,
            "element {}x{} not divisible by codec factor {factor}",
            self.element_h,
            self.element_w
        );
        Self::new(self.k, self.control_rows, self.element_h / factor, self.element_w / factor)
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        ensure!(
            img.height() == self.grid_h() && img.width() == self.grid_w(),
            Shape,
            "grid tensor is {}x{}, layout expects {}x{}",
            img.height(),
            img.width(),
            self.grid_h(),
            self.grid_w()
        );
        Ok(())
    }
}

/// A grid image with its layout and the sequence index of element `(0,0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridImage {
    pub pixels: Image,
    pub layout: GridLayout,
    pub start_index: usize,
}

impl GridImage {
    /// Sequence index of element `(i, j)`.
    pub fn index_of(&self, i: usize, j: usize) -> usize {
        self.start_index + i * self.layout.k + j
    }
}

// ---------------------------------------------------------------------------
// Bicubic resampling

const CUBIC_A: f64 = -0.5;

/// Catmull-Rom cubic convolution kernel (`a = -0.5`).
#[inline]
pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

struct Taps {
    index: Vec<[usize; 4]>,
    weight: Vec<[f64; 4]>,
}

fn cubic_taps(in_len: usize, out_len: usize) -> Taps {
    let scale = in_len as f64 / out_len as f64;
    let last = in_len as isize - 1;
    let mut index = Vec::with_capacity(out_len);
    let mut weight = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let t = src - base;
        let base = base as isize;
        let mut idx = [0usize; 4];
        let mut w = [0f64; 4];
        for k in 0..4 {
            let tap = base - 1 + k as isize;
            idx[k] = tap.clamp(0, last) as usize;
            w[k] = cubic_kernel(t - (k as f64 - 1.0));
        }
        index.push(idx);
        weight.push(w);
    }
    Taps { index, weight }
}

/// Bicubic (Catmull-Rom) resampling with edge-clamped borders and half-pixel
/// centre alignment. Output is clamped to `[0,1]` when the input lies there.
pub fn resample_frame(frame: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    ensure!(out_h >= 1 && out_w >= 1, InvalidArgument, "output size must be positive");
    frame.ensure_finite("resample input")?;
    let (c, h, w) = frame.shape();
    if (h, w) == (out_h, out_w) {
        return Ok(frame.clone());
    }
    let (lo, hi) = frame.min_max();
    let clamp = lo >= 0.0 && hi <= 1.0;

    let tx = cubic_taps(w, out_w);
    let ty = cubic_taps(h, out_h);
    let mut out = Image::zeros(c, out_h, out_w);
    let mut rows = vec![0f64; h * out_w];
    for ch in 0..c {
        let src = frame.plane(ch);
        for y in 0..h {
            let line = &src[y * w..(y + 1) * w];
            for ox in 0..out_w {
                let (idx, wt) = (&tx.index[ox], &tx.weight[ox]);
                rows[y * out_w + ox] = (0..4).map(|k| wt[k] * line[idx[k]] as f64).sum();
            }
        }
        let dst = out.plane_mut(ch);
        for oy in 0..out_h {
            let (idx, wt) = (&ty.index[oy], &ty.weight[oy]);
            for ox in 0..out_w {
                let mut v: f64 = (0..4).map(|k| wt[k] * rows[idx[k] * out_w + ox]).sum();
                if clamp {
                    v = v.clamp(0.0, 1.0);
                }
                dst[oy * out_w + ox] = v as f32;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Packing

/// Places `K²` frames into a grid in row-major order. Single-channel frames are
/// replicated to three channels.
pub fn pack_grid(frames: &[Image], layout: GridLayout, start_index: usize) -> Result<GridImage> {
    ensure!(
        frames.len() == layout.elements(),
        InvalidArgument,
        "grid with K={} needs {} frames, got {}",
        layout.k,
        layout.elements(),
        frames.len()
    );
    let (c0, _, _) = frames[0].shape();
    for (i, f) in frames.iter().enumerate() {
        ensure!(
            f.shape() == (c0, layout.element_h, layout.element_w),
            Shape,
            "frame {i} has shape {:?}, expected ({c0}, {}, {})",
            f.shape(),
            layout.element_h,
            layout.element_w
        );
    }
    let channels = if c0 == 1 { 3 } else { c0 };
    let mut pixels = Image::zeros(channels, layout.grid_h(), layout.grid_w());
    for (n, f) in frames.iter().enumerate() {
        let (i, j) = (n / layout.k, n % layout.k);
        let f = if c0 == 1 { f.to_rgb() } else { f.clone() };
        pixels.paste(&f, i * layout.element_h, j * layout.element_w)?;
    }
    Ok(GridImage { pixels, layout, start_index })
}

/// Splits a grid image into its `K²` elements in temporal order.
pub fn unpack_grid(grid: &GridImage) -> Result<Vec<Image>> {
    grid.layout.check_image(&grid.pixels)?;
    unpack_image(&grid.pixels, grid.layout.k)
}

/// Splits any image whose sides are divisible by `k` into `k²` tiles.
pub fn unpack_image(img: &Image, k: usize) -> Result<Vec<Image>> {
    ensure!(k >= 1, InvalidArgument, "K must be positive");
    ensure!(
        img.height() % k == 0 && img.width() % k == 0,
        Shape,
        "{}x{} grid is not divisible by K={k}",
        img.height(),
        img.width()
    );
    let (eh, ew) = (img.height() / k, img.width() / k);
    let mut out = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            out.push(img.crop(i * eh, j * ew, eh, ew)?);
        }
    }
    Ok(out)
}

/// Averages channels down to one; the inverse direction of the gray
/// replication done by [`pack_grid`].
pub fn collapse_to_gray(frame: &Image) -> Image {
    frame.to_gray()
}

/// Downsamples every frame to the layout's element size and packs windows of
/// `K²` consecutive frames starting at `0, stride, 2·stride, …`.
pub fn extract_training_grids(seq: &Sequence, layout: GridLayout, stride: usize) -> Result<Vec<GridImage>> {
    ensure!(stride >= 1, InvalidArgument, "stride must be at least 1");
    let need = layout.elements();
    if seq.len() < need {
        return Err(Error::InvalidArgument(format!(
            "sequence of {} frames yields no grids of {need} elements",
            seq.len()
        )));
    }
    let small = seq
        .frames()
        .iter()
        .map(|f| resample_frame(f, layout.element_h, layout.element_w))
        .collect::<Result<Vec<_>>>()?;
    (0..=seq.len() - need).step_by(stride).map(|n| pack_grid(&small[n..n + need], layout, n)).collect()
}

// ---------------------------------------------------------------------------
// Row shift and masks

/// Moves the last `r` element rows to the top: output row `i` is input row
/// `i + (K - r)` for `i < r`; the remaining rows are zero.
pub fn row_shift(x: &Image, layout: &GridLayout) -> Result<Image> {
    let r = layout.control_rows;
    ensure!(r >= 1, InvalidArgument, "row shift needs at least one control row");
    layout.check_image(x)?;
    let (c, h, w) = x.shape();
    let band = layout.element_h * w;
    let offset = (layout.k - r) * layout.element_h * w;
    let mut out = Image::zeros(c, h, w);
    for ch in 0..c {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        dst[..r * band].copy_from_slice(&src[offset..offset + r * band]);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Step1,
    Step2Prev,
    Step2Current,
    Step2Next,
}

/// A binary mask that is constant along each element row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowMask {
    rows: Vec<bool>,
    pub kind: MaskKind,
}

impl RowMask {
    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> bool {
        self.rows[i]
    }

    /// The `K×K` matrix of 0/1 entries.
    pub fn values(&self) -> Vec<u8> {
        let k = self.k();
        (0..k * k).map(|n| self.rows[n / k] as u8).collect()
    }

    /// `m ⊙ on + (1 - m) ⊙ off`, evaluated as an exact row-wise selection.
    pub fn blend(&self, on: &Image, off: &Image, layout: &GridLayout) -> Result<Image> {
        compose_rows(&[(self, on), (&self.complement(), off)], layout)
    }

    pub fn complement(&self) -> RowMask {
        RowMask { rows: self.rows.iter().map(|b| !b).collect(), kind: self.kind }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Step1,
    Step2,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskSet {
    Step1(RowMask),
    Step2 { prev: RowMask, current: RowMask, next: RowMask },
}

pub fn make_masks(layout: &GridLayout, mode: MaskMode) -> Result<MaskSet> {
    let k = layout.k;
    match mode {
        MaskMode::Step1 => {
            let r = layout.control_rows;
            ensure!(r > 0 && r < k, InvalidArgument, "step-1 mask needs 0 < r < K, got r={r}, K={k}");
            Ok(MaskSet::Step1(RowMask { rows: (0..k).map(|i| i < r).collect(), kind: MaskKind::Step1 }))
        }
        MaskMode::Step2 => {
            ensure!(k >= 3, InvalidArgument, "step-2 masks need K >= 3, got K={k}");
            let mk = |f: &dyn Fn(usize) -> bool, kind| RowMask { rows: (0..k).map(f).collect(), kind };
            Ok(MaskSet::Step2 {
                prev: mk(&|i| i == 0, MaskKind::Step2Prev),
                current: mk(&|i| i > 0 && i + 1 < k, MaskKind::Step2Current),
                next: mk(&|i| i + 1 == k, MaskKind::Step2Next),
            })
        }
    }
}

/// Builds an image whose element row `i` is copied from the single part whose
/// mask has row `i` set. The masks must partition the rows.
pub fn compose_rows(parts: &[(&RowMask, &Image)], layout: &GridLayout) -> Result<Image> {
    ensure!(!parts.is_empty(), InvalidArgument, "nothing to compose");
    let first = parts[0].1;
    for (m, img) in parts {
        ensure!(m.k() == layout.k, Shape, "mask K={} vs layout K={}", m.k(), layout.k);
        layout.check_image(img)?;
        img.ensure_same_shape(first, "compose_rows")?;
    }
    let (c, h, w) = first.shape();
    let band = layout.element_h * w;
    let mut out = Image::zeros(c, h, w);
    for i in 0..layout.k {
        let owners: Vec<&Image> = parts.iter().filter(|(m, _)| m.row(i)).map(|p| p.1).collect();
        ensure!(owners.len() == 1, InvalidArgument, "row {i} is claimed by {} masks", owners.len());
        for ch in 0..c {
            let src = &owners[0].plane(ch)[i * band..(i + 1) * band];
            out.plane_mut(ch)[i * band..(i + 1) * band].copy_from_slice(src);
        }
    }
    Ok(out)
}
