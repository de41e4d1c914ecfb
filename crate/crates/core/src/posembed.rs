//! Fixed sinusoidal positional embeddings for grid images.
//!
//! Three schemes are available:
//! * `TwoD`: per patch, `[e(row); e(col)]` over the whole grid, `D/2` dims each.
//! * `ThreeDGrid`: per patch, `[e(frame); e(row in frame); e(col in frame)]` with
//!   `⌊D/3⌋` dims per axis and zero padding for the `D mod 3` remainder. The table
//!   is computed over the `(frame, row, col)` volume of downsampled frames and
//!   then rearranged into grid patch order.
//! * `Combined`: the average of the two tables above.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::seqgrid::GridLayout;

const FREQ_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosScheme {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d_grid")]
    ThreeDGrid,
    Combined,
}

impl std::str::FromStr for PosScheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "2d" => Ok(Self::TwoD),
            "3d_grid" | "3d" => Ok(Self::ThreeDGrid),
            "combined" => Ok(Self::Combined),
            other => Err(format!("unknown positional scheme '{other}'")),
        }
    }
}

/// `[sin(p·ω_0) … sin(p·ω_{d/2-1}), cos(p·ω_0) … cos(p·ω_{d/2-1})]` with
/// `ω_i = 10000^(-2i/d)`.
pub fn sincos_1d(p: f64, d: usize) -> Result<Vec<f64>> {
    ensure!(d >= 2 && d % 2 == 0, InvalidArgument, "sincos width must be even and >= 2, got {d}");
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let omega = FREQ_BASE.powf(-2.0 * i as f64 / d as f64);
        out[i] = (p * omega).sin();
        out[half + i] = (p * omega).cos();
    }
    Ok(out)
}

/// Writes `sincos_1d(p, ·)` into a sub-block of width `width`. Odd widths get the
/// even part filled and one trailing zero.
fn fill_axis(dst: &mut [f64], p: f64) {
    let even = dst.len() & !1;
    if even >= 2 {
        let e = sincos_1d(p, even).expect("even width");
        dst[..even].copy_from_slice(&e);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosEmbedTable {
    /// Row-major `num_patches × dim`.
    pub values: Vec<f64>,
    pub scheme: PosScheme,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub dim: usize,
}

impl PosEmbedTable {
    pub fn num_patches(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    pub fn row(&self, patch: usize) -> &[f64] {
        &self.values[patch * self.dim..(patch + 1) * self.dim]
    }
}

/// Widths allotted to the frame, row and column axes of the 3D scheme, plus the
/// zero-padded remainder.
pub fn axis_widths(dim: usize) -> ([usize; 3], usize) {
    let a = dim / 3;
    ([a, a, a], dim - 3 * a)
}

struct PatchGeometry {
    rows: usize,
    cols: usize,
    elem_rows: usize,
    elem_cols: usize,
    k: usize,
}

fn geometry(layout: &GridLayout, patch: usize) -> Result<PatchGeometry> {
    ensure!(patch >= 1, InvalidArgument, "patch size must be positive");
    ensure!(
        layout.element_h % patch == 0 && layout.element_w % patch == 0,
        InvalidArgument,
        "patch {patch} does not divide the {}x{} grid elements",
        layout.element_h,
        layout.element_w
    );
    Ok(PatchGeometry {
        rows: layout.grid_h() / patch,
        cols: layout.grid_w() / patch,
        elem_rows: layout.element_h / patch,
        elem_cols: layout.element_w / patch,
        k: layout.k,
    })
}

/// For each grid patch (row-major over the grid), its index in
/// `(frame, row-in-frame, col-in-frame)` order.
pub fn grid_to_volume_index(layout: &GridLayout, patch: usize) -> Result<Vec<usize>> {
    let g = geometry(layout, patch)?;
    let per_frame = g.elem_rows * g.elem_cols;
    Ok((0..g.rows * g.cols)
        .map(|n| {
            let (gy, gx) = (n / g.cols, n % g.cols);
            let frame = (gy / g.elem_rows) * g.k + gx / g.elem_cols;
            let (py, px) = (gy % g.elem_rows, gx % g.elem_cols);
            frame * per_frame + py * g.elem_cols + px
        })
        .collect())
}

/// The 3D table in volume order: rows enumerate `(frame, py, px)`.
pub fn volume_table(layout: &GridLayout, patch: usize, dim: usize) -> Result<Vec<f64>> {
    ensure!(dim >= 6, InvalidArgument, "embedding width must be >= 6, got {dim}");
    let g = geometry(layout, patch)?;
    let ([a, _, _], _) = axis_widths(dim);
    let frames = g.k * g.k;
    let mut out = vec![0.0; frames * g.elem_rows * g.elem_cols * dim];
    let mut n = 0;
    for f in 0..frames {
        for py in 0..g.elem_rows {
            for px in 0..g.elem_cols {
                let row = &mut out[n * dim..(n + 1) * dim];
                fill_axis(&mut row[..a], f as f64);
                fill_axis(&mut row[a..2 * a], py as f64);
                fill_axis(&mut row[2 * a..3 * a], px as f64);
                n += 1;
            }
        }
    }
    Ok(out)
}

fn table_2d(g: &PatchGeometry, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; g.rows * g.cols * dim];
    for gy in 0..g.rows {
        for gx in 0..g.cols {
            let row = &mut out[(gy * g.cols + gx) * dim..][..dim];
            fill_axis(&mut row[..half], gy as f64);
            fill_axis(&mut row[half..2 * half], gx as f64);
        }
    }
    out
}

pub fn build_pos_embed(layout: &GridLayout, patch: usize, dim: usize, scheme: PosScheme) -> Result<PosEmbedTable> {
    ensure!(dim >= 6, InvalidArgument, "embedding width must be >= 6, got {dim}");
    let g = geometry(layout, patch)?;
    let three_d = || -> Result<Vec<f64>> {
        let vol = volume_table(layout, patch, dim)?;
        let order = grid_to_volume_index(layout, patch)?;
        let mut out = vec![0.0; vol.len()];
        for (n, &v) in order.iter().enumerate() {
            out[n * dim..(n + 1) * dim].copy_from_slice(&vol[v * dim..(v + 1) * dim]);
        }
        Ok(out)
    };
    let values = match scheme {
        PosScheme::TwoD => table_2d(&g, dim),
        PosScheme::ThreeDGrid => three_d()?,
        PosScheme::Combined => table_2d(&g, dim).iter().zip(three_d()?).map(|(a, b)| 0.5 * (a + b)).collect(),
    };
    Ok(PosEmbedTable { values, scheme, patch_rows: g.rows, patch_cols: g.cols, dim })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sincos_basics() {
        let z = sincos_1d(0.0, 6).unwrap();
        assert_eq!(z, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let one = sincos_1d(1.0, 2).unwrap();
        assert!((one[0] - 0.841_470_984_807_896_5).abs() < 1e-12);
        assert!((one[1] - 0.540_302_305_868_139_8).abs() < 1e-12);
        assert!(sincos_1d(1.0, 5).is_err());
        for p in [0.3, 7.0, 123.0, 999.5] {
            let e = sincos_1d(p, 16).unwrap();
            for i in 0..8 {
                assert!((e[i] * e[i] + e[8 + i] * e[8 + i] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn axis_allotment() {
        assert_eq!(axis_widths(9), ([3, 3, 3], 0));
        assert_eq!(axis_widths(10), ([3, 3, 3], 1));
        let l = GridLayout::new(2, 1, 4, 4).unwrap();
        let t = build_pos_embed(&l, 2, 10, PosScheme::ThreeDGrid).unwrap();
        for p in 0..t.num_patches() {
            assert_eq!(t.row(p)[9], 0.0);
        }
    }

    #[test]
    fn single_frame_grid_has_zero_frame_index() {
        let l = GridLayout::new(1, 0, 8, 8).unwrap();
        let t = build_pos_embed(&l, 2, 24, PosScheme::ThreeDGrid).unwrap();
        let expect = sincos_1d(0.0, 8).unwrap();
        for p in 0..t.num_patches() {
            assert_eq!(&t.row(p)[..8], expect.as_slice());
        }
    }

    #[test]
    fn rejects_bad_patch() {
        let l = GridLayout::new(2, 1, 6, 6).unwrap();
        assert!(build_pos_embed(&l, 4, 12, PosScheme::TwoD).is_err());
        assert!(build_pos_embed(&l, 3, 4, PosScheme::TwoD).is_err());
    }

    #[test]
    fn entries_bounded_and_deterministic() {
        let l = GridLayout::new(4, 3, 8, 8).unwrap();
        for scheme in [PosScheme::TwoD, PosScheme::ThreeDGrid, PosScheme::Combined] {
            let a = build_pos_embed(&l, 2, 30, scheme).unwrap();
            let b = build_pos_embed(&l, 2, 30, scheme).unwrap();
            assert_eq!(a, b);
            assert!(a.values.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
    }
}
