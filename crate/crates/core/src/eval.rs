//! Sequence and image metrics.
//!
//! The Fréchet proxy compares Gaussian fits of 16 hand-crafted features per
//! image, computed on the RGB image (gray inputs are replicated):
//!
//! | index  | feature                                                        |
//! |--------|----------------------------------------------------------------|
//! | 0..3   | mean of each RGB channel                                       |
//! | 3..12  | mean luminance of each cell of a 3×3 partition, row-major      |
//! | 12..16 | fraction of pixels whose luminance gradient magnitude falls in |
//! |        | `[0, .02)`, `[.02, .08)`, `[.08, .2)`, `[.2, ∞)`               |
//!
//! Luminance is the channel average; gradients are forward differences with
//! the last row/column repeated.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{Image, Sequence};

pub const FEATURE_DIM: usize = 16;
const GRAD_EDGES: [f64; 3] = [0.02, 0.08, 0.2];
const FD_REG: f64 = 1e-6;

/// Mean absolute difference between consecutive frames on the 0–255 scale.
pub fn flicker(seq: &Sequence) -> Result<f64> {
    flicker_frames(seq.frames())
}

pub fn flicker_frames(frames: &[Image]) -> Result<f64> {
    ensure!(frames.len() >= 2, InvalidArgument, "flicker needs at least 2 frames, got {}", frames.len());
    let mut total = 0.0;
    for (i, w) in frames.windows(2).enumerate() {
        w[1].ensure_same_shape(&w[0], &format!("frame {}", i + 1))?;
        let sum: f64 = w[0].data().iter().zip(w[1].data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
        total += 255.0 * sum / w[0].len() as f64;
    }
    Ok(total / (frames.len() - 1) as f64)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b, "mse")?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64)
}

fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

/// `10·log10(1/MSE)` for values on the `[0,1]` scale. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// PSNR of the pooled MSE over every frame.
pub fn psnr_frames(a: &[Image], b: &[Image]) -> Result<f64> {
    ensure!(!a.is_empty(), InvalidArgument, "psnr of empty frame lists");
    ensure!(a.len() == b.len(), Shape, "{} frames vs {}", a.len(), b.len());
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b) {
        sum += mse(x, y)? * x.len() as f64;
        count += x.len();
    }
    Ok(psnr_from_mse(sum / count as f64))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable Gaussian filtering of a `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            tmp[y * ow + x0] = (0..SSIM_WINDOW).map(|j| k[j] * x[y * w + x0 + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x0 in 0..ow {
            out[y * ow + x0] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM over all valid 11×11 windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let (c, h, w) = a.shape();
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        InvalidArgument,
        "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
    );
    let k = ssim_kernel();
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.plane(ch).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.plane(ch).iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&prod(&x, &x), h, w, &k);
        let syy = filter_valid(&prod(&y, &y), h, w, &k);
        let sxy = filter_valid(&prod(&x, &y), h, w, &k);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / n as f64;
    }
    Ok(total / c as f64)
}

/// The 16 proxy features of one image.
pub fn features(img: &Image) -> [f64; FEATURE_DIM] {
    let rgb = if img.channels() == 3 { img.clone() } else { img.to_gray().to_rgb() };
    let (_, h, w) = rgb.shape();
    let mut f = [0.0; FEATURE_DIM];
    for (ch, v) in f.iter_mut().take(3).enumerate() {
        *v = rgb.plane(ch).iter().map(|&p| p as f64).sum::<f64>() / (h * w) as f64;
    }
    let lum: Vec<f64> = (0..h * w).map(|i| (0..3).map(|ch| rgb.plane(ch)[i] as f64).sum::<f64>() / 3.0).collect();
    for cy in 0..3 {
        for cx in 0..3 {
            let (y0, y1) = (cy * h / 3, ((cy + 1) * h / 3).max(cy * h / 3 + 1).min(h));
            let (x0, x1) = (cx * w / 3, ((cx + 1) * w / 3).max(cx * w / 3 + 1).min(w));
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += lum[y * w + x];
                }
            }
            f[3 + cy * 3 + cx] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    let mut hist = [0usize; 4];
    for y in 0..h {
        for x in 0..w {
            let v = lum[y * w + x];
            let dx = lum[y * w + (x + 1).min(w - 1)] - v;
            let dy = lum[(y + 1).min(h - 1) * w + x] - v;
            let g = (dx * dx + dy * dy).sqrt();
            hist[GRAD_EDGES.iter().take_while(|&&e| g >= e).count()] += 1;
        }
    }
    for (b, &n) in hist.iter().enumerate() {
        f[12 + b] = n as f64 / (h * w) as f64;
    }
    f
}

fn gaussian_fit(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    let d = rows[0].len();
    ensure!(rows.iter().all(|r| r.len() == d), Shape, "feature rows differ in length");
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += FD_REG;
    }
    Ok((mean, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("covariance is degenerate after regularization (min eigenvalue {min})")));
    }
    let s = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * s * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two sets of feature vectors.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    ensure!(a.len() >= 2 && b.len() >= 2, InvalidArgument, "each set needs at least 2 items");
    let (ma, ca) = gaussian_fit(a)?;
    let (mb, cb) = gaussian_fit(b)?;
    ensure!(ma.len() == mb.len(), Shape, "feature widths differ");
    let ra = sqrt_psd(&ca)?;
    sqrt_psd(&cb)?;
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let diff = (&ma - &mb).norm_squared();
    let fd = diff + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    ensure!(fd.is_finite(), Numerical, "Fréchet distance is not finite");
    Ok(fd.max(0.0))
}

pub const PROXY_FD_MIN_ITEMS: usize = 8;

/// Fréchet distance between the feature distributions of two image sets.
pub fn proxy_fd(set_a: &[Image], set_b: &[Image]) -> Result<f64> {
    ensure!(
        set_a.len() >= PROXY_FD_MIN_ITEMS && set_b.len() >= PROXY_FD_MIN_ITEMS,
        InvalidArgument,
        "proxy_fd needs at least {PROXY_FD_MIN_ITEMS} items per set, got {} and {}",
        set_a.len(),
        set_b.len()
    );
    let fa: Vec<Vec<f64>> = set_a.iter().map(|i| features(i).to_vec()).collect();
    let fb: Vec<Vec<f64>> = set_b.iter().map(|i| features(i).to_vec()).collect();
    frechet_distance(&fa, &fb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    /// `None` when the value is infinite (PSNR of identical inputs).
    pub value: Option<f64>,
    pub infinite: bool,
    pub n_items: usize,
    pub config_digest: String,
}

impl EvalReport {
    pub fn new(metric: &str, value: f64, n_items: usize, config_digest: String) -> Self {
        let infinite = value.is_infinite();
        Self { metric: metric.to_string(), value: (!infinite).then_some(value), infinite, n_items, config_digest }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flicker_extremes() {
        let a = Image::filled(1, 4, 4, 0.0);
        let b = Image::filled(1, 4, 4, 1.0);
        let s = Sequence::new(vec![a.clone(), b.clone(), a.clone(), b]).unwrap();
        assert_eq!(flicker(&s).unwrap(), 255.0);
        let c = Sequence::new(vec![a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(flicker(&c).unwrap(), 0.0);
        assert!(flicker(&Sequence::new(vec![a]).unwrap()).is_err());
    }

    #[test]
    fn psnr_formula() {
        let a = Image::filled(1, 4, 4, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(1, 4, 4, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn ssim_identity_and_negative() {
        let a = Image::from_fn(1, 16, 16, |_, y, x| ((x * 7 + y * 3) % 11) as f32 / 10.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg).unwrap() < 0.0);
        assert!(ssim(&Image::zeros(1, 8, 16), &Image::zeros(1, 8, 16)).is_err());
    }
}
