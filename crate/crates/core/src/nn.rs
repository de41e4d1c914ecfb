//! Dense building blocks with hand-written backward passes.
//!
//! Matrices are row-major `Vec<F>` buffers. `F` is `f32` for training and
//! sampling and `f64` for gradient verification.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand_distr::{Distribution, Normal, Uniform};

use crate::rng::Rng;

pub trait Real:
    Float + Sum + AddAssign + SubAssign + MulAssign + DivAssign + Send + Sync + Debug + Default + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// `C ← α·A·B + β·C` over strided operands.
    ///
    /// # Safety
    /// Every addressed element of `a`, `b` and `c` must lie inside its buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided read-only matrix operand.
#[derive(Clone, Copy)]
pub struct View<'a, F> {
    pub data: &'a [F],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> View<'a, F> {
    /// Row-major with leading dimension `ld`.
    pub fn rows(data: &'a [F], ld: usize) -> Self {
        Self { data, rs: ld, cs: 1 }
    }
    pub fn t(self) -> Self {
        Self { data: self.data, rs: self.cs, cs: self.rs }
    }
    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `C ← α·A·B + β·C` with `A: m×k`, `B: k×n`, `C` row-major with leading
/// dimension `ldc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: View<'_, F>,
    b: View<'_, F>,
    beta: F,
    c: &mut [F],
    ldc: usize,
) {
    a.check(m, k);
    b.check(k, n);
    if m > 0 && n > 0 {
        assert!((m - 1) * ldc + n - 1 < c.len(), "output view out of bounds");
    }
    // SAFETY: all three operands were bounds-checked above.
    unsafe {
        F::raw_gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// A dense tensor with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![F::zero(); shape.iter().product()] }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| G::of(v.f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `y = x·W + b`, with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Self { weight: Tensor::zeros(&[inp, out]), bias: Tensor::zeros(&[out]) }
    }

    pub fn xavier(inp: usize, out: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (inp + out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let mut l = Self::zeros(inp, out);
        for w in &mut l.weight.data {
            *w = F::of(dist.sample(rng));
        }
        l
    }

    pub fn normal(inp: usize, out: usize, std: f64, rng: &mut Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        let mut l = Self::zeros(inp, out);
        for w in &mut l.weight.data {
            *w = F::of(dist.sample(rng));
        }
        l
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[0]
    }
    pub fn out_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &[F], rows: usize) -> Vec<F> {
        let (i, o) = (self.in_dim(), self.out_dim());
        debug_assert_eq!(x.len(), rows * i);
        let mut y = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias.data);
        }
        gemm(rows, i, o, F::one(), View::rows(x, i), View::rows(&self.weight.data, o), F::one(), &mut y, o);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx` when
    /// requested.
    pub fn backward(&self, x: &[F], dy: &[F], rows: usize, grad: &mut Linear<F>, want_dx: bool) -> Option<Vec<F>> {
        let (i, o) = (self.in_dim(), self.out_dim());
        gemm(i, rows, o, F::one(), View::rows(x, i).t(), View::rows(dy, o), F::one(), &mut grad.weight.data, o);
        for r in 0..rows {
            for (g, &d) in grad.bias.data.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
                *g += d;
            }
        }
        want_dx.then(|| {
            let mut dx = vec![F::zero(); rows * i];
            gemm(rows, o, i, F::one(), View::rows(dy, o), View::rows(&self.weight.data, o).t(), F::zero(), &mut dx, i);
            dx
        })
    }

    pub fn cast<G: Real>(&self) -> Linear<G> {
        Linear { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

pub const LN_EPS: f64 = 1e-6;

/// Row-wise layer norm without affine parameters. Returns the normalized rows
/// and the per-row reciprocal standard deviation.
pub fn layer_norm<F: Real>(x: &[F], rows: usize, dim: usize) -> (Vec<F>, Vec<F>) {
    let mut out = vec![F::zero(); rows * dim];
    let mut rstd = vec![F::zero(); rows];
    let inv_d = F::of(1.0 / dim as f64);
    let eps = F::of(LN_EPS);
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let s = F::one() / (var + eps).sqrt();
        rstd[r] = s;
        for (o, &v) in out[r * dim..(r + 1) * dim].iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    }
    (out, rstd)
}

/// Backward of [`layer_norm`]: `dx = rstd·(dn - mean(dn) - n·mean(dn⊙n))`.
pub fn layer_norm_backward<F: Real>(dn: &[F], normed: &[F], rstd: &[F], rows: usize, dim: usize, dx: &mut [F]) {
    let inv_d = F::of(1.0 / dim as f64);
    for r in 0..rows {
        let g = &dn[r * dim..(r + 1) * dim];
        let n = &normed[r * dim..(r + 1) * dim];
        let mean_g = g.iter().copied().sum::<F>() * inv_d;
        let mean_gn = g.iter().zip(n).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
        for ((d, &gi), &ni) in dx[r * dim..(r + 1) * dim].iter_mut().zip(g).zip(n) {
            *d += rstd[r] * (gi - mean_g - ni * mean_gn);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let sech2 = F::one() - th * th;
    half * (F::one() + th) + half * x * sech2 * c * (F::one() + F::of(3.0) * k * x * x)
}

#[inline]
pub fn silu<F: Real>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

#[inline]
pub fn silu_grad<F: Real>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s * (F::one() + x * (F::one() - s))
}

/// In-place numerically stable softmax over each row.
pub fn softmax_rows<F: Real>(x: &mut [F], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = F::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, View::rows(&a, k), View::rows(&b, n), 0.0, &mut c, n);
        let want = naive(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // (Aᵀ)ᵀ with A stored transposed
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, 1.0, View::rows(&at, m).t(), View::rows(&b, n), 0.0, &mut c2, n);
        assert_eq!(c, c2);
    }

    #[test]
    fn activation_derivatives() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "gelu at {x}");
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8, "silu at {x}");
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = rng_for(9, &[]);
        let lin = Linear::<f64>::xavier(6, 6, &mut rng);
        let x: Vec<f64> = (0..12).map(|i| (i as f64).sin() * 2.0).collect();
        let w = &lin.weight.data; // random cotangent
        let f = |x: &[f64]| -> f64 {
            let (n, _) = layer_norm(x, 2, 6);
            n.iter().zip(w).map(|(a, b)| a * b).sum()
        };
        let (n, rstd) = layer_norm(&x, 2, 6);
        let mut dx = vec![0.0; 12];
        layer_norm_backward(&w[..12], &n, &rstd, 2, 6, &mut dx);
        for i in 0..12 {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7, "coord {i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn linear_backward_matches_definition() {
        let mut rng = rng_for(3, &[]);
        let lin = Linear::<f64>::xavier(4, 3, &mut rng);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let dy: Vec<f64> = (0..6).map(|i| 1.0 - i as f64 * 0.2).collect();
        let mut g = Linear::zeros(4, 3);
        let dx = lin.backward(&x, &dy, 2, &mut g, true).unwrap();
        for i in 0..4 {
            for o in 0..3 {
                let want: f64 = (0..2).map(|r| x[r * 4 + i] * dy[r * 3 + o]).sum();
                assert!((g.weight.data[i * 3 + o] - want).abs() < 1e-12);
            }
        }
        let want_dx0: f64 = (0..3).map(|o| dy[o] * lin.weight.data[o]).sum();
        assert!((dx[0] - want_dx0).abs() < 1e-12);
    }
}
