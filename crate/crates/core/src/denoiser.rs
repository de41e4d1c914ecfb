//! A small diffusion transformer that predicts the noise in a grid image.
//!
//! Layout of one forward pass, for a batch of `B` images tokenized into `N`
//! patches each:
//!
//! ```text
//! tokens   = patchify(x_t [‖ cond]) · W_in + pos
//! c        = MLP(sincos(t)) [+ W_pool · mean(cond tokens)]
//! per block:
//!   h += gate₁ ⊙ Attn(LN(h)·(1+scale₁) + shift₁)
//!   h += gate₂ ⊙ MLP (LN(h)·(1+scale₂) + shift₂)
//! out      = (LN(h)·(1+scale_f) + shift_f) · W_head
//! ```
//!
//! where every `(shift, scale, gate)` triple is a linear function of `SiLU(c)`.
//! Modulation layers and the head start at zero, so a fresh model outputs zeros.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{training_loss, NoisePredictor, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::nn::{
    gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, silu, silu_grad, softmax_rows, Linear, Real, Tensor, View,
};
use crate::posembed::{build_pos_embed, sincos_1d, PosScheme};
use crate::rng::Rng;
use crate::seqgrid::GridLayout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub patch: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of the sinusoidal timestep features fed to the timestep MLP.
    pub time_dim: usize,
    pub conditional: bool,
    /// Also add a pooled projection of the condition to the adaLN input.
    pub cond_in_adaln: bool,
    pub pos_scheme: PosScheme,
    /// Elements per grid side, used by the 3D positional scheme.
    pub grid_k: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_size: 64,
            patch: 2,
            depth: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
            time_dim: 128,
            conditional: false,
            cond_in_adaln: false,
            pos_scheme: PosScheme::Combined,
            grid_k: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.input_channels >= 1 && self.input_size >= 1 && self.patch >= 1,
            InvalidArgument,
            "channels, size and patch must be positive"
        );
        ensure!(
            self.input_size % self.patch == 0,
            InvalidArgument,
            "input size {} is not divisible by patch {}",
            self.input_size,
            self.patch
        );
        ensure!(
            self.heads >= 1 && self.width % self.heads == 0,
            InvalidArgument,
            "width {} is not divisible by {} heads",
            self.width,
            self.heads
        );
        ensure!(self.width >= 6, InvalidArgument, "width must be >= 6");
        ensure!(self.mlp_ratio >= 1, InvalidArgument, "mlp ratio must be positive");
        ensure!(self.time_dim >= 2 && self.time_dim % 2 == 0, InvalidArgument, "timestep feature width must be even");
        ensure!(!self.cond_in_adaln || self.conditional, InvalidArgument, "cond_in_adaln requires a conditional model");
        ensure!(
            self.grid_k >= 1 && self.input_size % self.grid_k == 0,
            InvalidArgument,
            "input size {} is not divisible by grid K={}",
            self.input_size,
            self.grid_k
        );
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let s = self.input_size / self.patch;
        s * s
    }

    pub fn patch_dim(&self) -> usize {
        self.input_channels * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn grid_layout(&self) -> Result<GridLayout> {
        let e = self.input_size / self.grid_k;
        GridLayout::new(self.grid_k, 0, e, e)
    }
}

// ---------------------------------------------------------------------------
// Tokenization

fn check_patch(c: usize, h: usize, w: usize, patch: usize) -> Result<()> {
    ensure!(patch >= 1, InvalidArgument, "patch size must be positive");
    ensure!(h % patch == 0 && w % patch == 0, Shape, "image {c}x{h}x{w} is not divisible into {patch}x{patch} patches");
    Ok(())
}

/// Writes the patch tokens of `x` into `dst` (row stride `ld`, starting at
/// column 0 of each row).
fn patchify_into<F: Real>(x: &Image, patch: usize, dst: &mut [F], ld: usize) {
    let (c, h, w) = x.shape();
    let cols = w / patch;
    for ty in 0..h / patch {
        for tx in 0..cols {
            let row = &mut dst[(ty * cols + tx) * ld..];
            let mut k = 0;
            for ch in 0..c {
                let plane = x.plane(ch);
                for dy in 0..patch {
                    let base = (ty * patch + dy) * w + tx * patch;
                    for dx in 0..patch {
                        row[k] = F::of(plane[base + dx] as f64);
                        k += 1;
                    }
                }
            }
        }
    }
}

/// Non-overlapping `patch×patch` tokens in row-major order, each flattened
/// channel-major. Returned as a row-major `tokens × C·patch²` matrix.
pub fn patchify(x: &Image, patch: usize) -> Result<Vec<f32>> {
    let (c, h, w) = x.shape();
    check_patch(c, h, w, patch)?;
    let pd = c * patch * patch;
    let mut out = vec![0.0f32; (h / patch) * (w / patch) * pd];
    patchify_into(x, patch, &mut out, pd);
    Ok(out)
}

fn unpatchify_from<F: Real>(src: &[F], ld: usize, patch: usize, c: usize, h: usize, w: usize) -> Image {
    let cols = w / patch;
    let mut img = Image::zeros(c, h, w);
    for ty in 0..h / patch {
        for tx in 0..cols {
            let row = &src[(ty * cols + tx) * ld..];
            let mut k = 0;
            for ch in 0..c {
                let plane = img.plane_mut(ch);
                for dy in 0..patch {
                    let base = (ty * patch + dy) * w + tx * patch;
                    for dx in 0..patch {
                        plane[base + dx] = row[k].f64() as f32;
                        k += 1;
                    }
                }
            }
        }
    }
    img
}

/// Inverse of [`patchify`] for a square `c×size×size` image.
pub fn unpatchify(tokens: &[f32], patch: usize, c: usize, size: usize) -> Result<Image> {
    check_patch(c, size, size, patch)?;
    let pd = c * patch * patch;
    let n = (size / patch) * (size / patch);
    ensure!(tokens.len() == n * pd, Shape, "{} token values do not form {n} tokens of width {pd}", tokens.len());
    Ok(unpatchify_from(tokens, pd, patch, c, size, size))
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<F> {
    /// `D → 6D`: shift₁, scale₁, gate₁, shift₂, scale₂, gate₂.
    pub modulation: Linear<F>,
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DitParams<F> {
    pub patch_in: Linear<F>,
    pub t_fc1: Linear<F>,
    pub t_fc2: Linear<F>,
    pub cond_pool: Option<Linear<F>>,
    pub blocks: Vec<BlockParams<F>>,
    /// `D → 2D`: shift, scale of the final norm.
    pub final_mod: Linear<F>,
    pub head: Linear<F>,
}

impl<F: Real> DitParams<F> {
    fn zeros(cfg: &DenoiserConfig) -> Self {
        let d = cfg.width;
        let pd = cfg.patch_dim();
        let pin = if cfg.conditional { 2 * pd } else { pd };
        Self {
            patch_in: Linear::zeros(pin, d),
            t_fc1: Linear::zeros(cfg.time_dim, d),
            t_fc2: Linear::zeros(d, d),
            cond_pool: cfg.cond_in_adaln.then(|| Linear::zeros(pd, d)),
            blocks: (0..cfg.depth)
                .map(|_| BlockParams {
                    modulation: Linear::zeros(d, 6 * d),
                    qkv: Linear::zeros(d, 3 * d),
                    proj: Linear::zeros(d, d),
                    fc1: Linear::zeros(d, cfg.mlp_ratio * d),
                    fc2: Linear::zeros(cfg.mlp_ratio * d, d),
                })
                .collect(),
            final_mod: Linear::zeros(d, 2 * d),
            head: Linear::zeros(d, pd),
        }
    }

    fn init(cfg: &DenoiserConfig, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(cfg);
        let d = cfg.width;
        p.patch_in = Linear::xavier(p.patch_in.in_dim(), d, rng);
        p.t_fc1 = Linear::normal(cfg.time_dim, d, 0.02, rng);
        p.t_fc2 = Linear::normal(d, d, 0.02, rng);
        if let Some(pool) = &mut p.cond_pool {
            *pool = Linear::normal(pool.in_dim(), d, 0.02, rng);
        }
        for b in &mut p.blocks {
            b.qkv = Linear::xavier(d, 3 * d, rng);
            b.proj = Linear::xavier(d, d, rng);
            b.fc1 = Linear::xavier(d, b.fc1.out_dim(), rng);
            b.fc2 = Linear::xavier(b.fc2.in_dim(), d, rng);
        }
        p
    }

    /// Every linear layer with its name, in a fixed order.
    pub fn linears(&self) -> Vec<(String, &Linear<F>)> {
        let mut out = vec![
            ("patch_in".to_string(), &self.patch_in),
            ("t_fc1".to_string(), &self.t_fc1),
            ("t_fc2".to_string(), &self.t_fc2),
        ];
        if let Some(p) = &self.cond_pool {
            out.push(("cond_pool".to_string(), p));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.modulation"), &b.modulation));
            out.push((format!("blocks.{i}.qkv"), &b.qkv));
            out.push((format!("blocks.{i}.proj"), &b.proj));
            out.push((format!("blocks.{i}.fc1"), &b.fc1));
            out.push((format!("blocks.{i}.fc2"), &b.fc2));
        }
        out.push(("final_mod".to_string(), &self.final_mod));
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Same order as [`Self::linears`].
    pub fn linears_mut(&mut self) -> Vec<&mut Linear<F>> {
        let mut out = vec![&mut self.patch_in, &mut self.t_fc1, &mut self.t_fc2];
        if let Some(p) = &mut self.cond_pool {
            out.push(p);
        }
        for b in &mut self.blocks {
            out.push(&mut b.modulation);
            out.push(&mut b.qkv);
            out.push(&mut b.proj);
            out.push(&mut b.fc1);
            out.push(&mut b.fc2);
        }
        out.push(&mut self.final_mod);
        out.push(&mut self.head);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        self.linears()
            .into_iter()
            .flat_map(|(name, l)| [(format!("{name}.weight"), &l.weight), (format!("{name}.bias"), &l.bias)])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.linears_mut().into_iter().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<G: Real>(&self) -> DitParams<G> {
        DitParams {
            patch_in: self.patch_in.cast(),
            t_fc1: self.t_fc1.cast(),
            t_fc2: self.t_fc2.cast(),
            cond_pool: self.cond_pool.as_ref().map(Linear::cast),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    modulation: b.modulation.cast(),
                    qkv: b.qkv.cast(),
                    proj: b.proj.cast(),
                    fc1: b.fc1.cast(),
                    fc2: b.fc2.cast(),
                })
                .collect(),
            final_mod: self.final_mod.cast(),
            head: self.head.cast(),
        }
    }

    /// Sum of squares over every parameter.
    pub fn sq_norm(&self) -> f64 {
        self.named_tensors().iter().flat_map(|(_, t)| t.data.iter()).map(|v| v.f64() * v.f64()).sum()
    }

    fn scale(&mut self, s: F) {
        for t in self.tensors_mut() {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Model

#[derive(Clone, Debug)]
pub struct DenoiserModel<F> {
    config: DenoiserConfig,
    pub params: DitParams<F>,
    /// `tokens × D`.
    pos: Vec<F>,
}

struct BlockCache<F> {
    modv: Vec<F>,
    n1: Vec<F>,
    rstd1: Vec<F>,
    u1: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    att: Vec<F>,
    a: Vec<F>,
    n2: Vec<F>,
    rstd2: Vec<F>,
    u2: Vec<F>,
    f1: Vec<F>,
    g: Vec<F>,
    f2: Vec<F>,
}

struct Cache<F> {
    batch: usize,
    xin: Vec<F>,
    temb: Vec<F>,
    a1: Vec<F>,
    s1: Vec<F>,
    c: Vec<F>,
    sc: Vec<F>,
    pooled: Option<Vec<F>>,
    blocks: Vec<BlockCache<F>>,
    fmod: Vec<F>,
    nf: Vec<F>,
    rstdf: Vec<F>,
    uf: Vec<F>,
}

/// `n·(1+scale[b]) + shift[b]`, with the per-item vectors read from `modv`
/// (row stride `stride`) at column offsets `shift` and `scale`.
fn modulate<F: Real>(
    n: &[F],
    modv: &[F],
    stride: usize,
    shift: usize,
    scale: usize,
    tokens: usize,
    d: usize,
) -> Vec<F> {
    let mut out = vec![F::zero(); n.len()];
    for (r, (o, x)) in out.chunks_mut(d).zip(n.chunks(d)).enumerate() {
        let m = &modv[(r / tokens) * stride..];
        for j in 0..d {
            o[j] = x[j] * (F::one() + m[scale + j]) + m[shift + j];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn modulate_backward<F: Real>(
    du: &[F],
    n: &[F],
    modv: &[F],
    dmodv: &mut [F],
    stride: usize,
    shift: usize,
    scale: usize,
    tokens: usize,
    d: usize,
) -> Vec<F> {
    let mut dn = vec![F::zero(); n.len()];
    for (r, ((o, g), x)) in dn.chunks_mut(d).zip(du.chunks(d)).zip(n.chunks(d)).enumerate() {
        let b = r / tokens;
        let m = &modv[b * stride..];
        let dm = &mut dmodv[b * stride..];
        for j in 0..d {
            o[j] = g[j] * (F::one() + m[scale + j]);
            dm[scale + j] += g[j] * x[j];
            dm[shift + j] += g[j];
        }
    }
    dn
}

fn gated_add<F: Real>(h: &mut [F], a: &[F], modv: &[F], stride: usize, gate: usize, tokens: usize, d: usize) {
    for (r, (hr, ar)) in h.chunks_mut(d).zip(a.chunks(d)).enumerate() {
        let m = &modv[(r / tokens) * stride + gate..];
        for j in 0..d {
            hr[j] += m[j] * ar[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gated_add_backward<F: Real>(
    dh: &[F],
    a: &[F],
    modv: &[F],
    dmodv: &mut [F],
    stride: usize,
    gate: usize,
    tokens: usize,
    d: usize,
) -> Vec<F> {
    let mut da = vec![F::zero(); a.len()];
    for (r, ((o, g), x)) in da.chunks_mut(d).zip(dh.chunks(d)).zip(a.chunks(d)).enumerate() {
        let b = r / tokens;
        let m = &modv[b * stride + gate..];
        let dm = &mut dmodv[b * stride + gate..];
        for j in 0..d {
            o[j] = g[j] * m[j];
            dm[j] += g[j] * x[j];
        }
    }
    da
}

struct AttnShape {
    batch: usize,
    tokens: usize,
    width: usize,
    heads: usize,
}

impl AttnShape {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }
    fn scale<F: Real>(&self) -> F {
        F::of(1.0 / (self.head_dim() as f64).sqrt())
    }
}

/// Multi-head self-attention on packed `qkv` rows (`[q | k | v]`, width `3D`).
/// Returns the concatenated head outputs and the attention probabilities.
fn attention<F: Real>(qkv: &[F], s: &AttnShape) -> (Vec<F>, Vec<F>) {
    let (n, d, dh) = (s.tokens, s.width, s.head_dim());
    let ld = 3 * d;
    let mut att = vec![F::zero(); s.batch * n * d];
    let mut probs = vec![F::zero(); s.batch * s.heads * n * n];
    for b in 0..s.batch {
        let base = b * n * ld;
        for h in 0..s.heads {
            let p = &mut probs[(b * s.heads + h) * n * n..][..n * n];
            let q = View::rows(&qkv[base + h * dh..], ld);
            let k = View::rows(&qkv[base + d + h * dh..], ld);
            gemm(n, dh, n, s.scale(), q, k.t(), F::zero(), p, n);
            softmax_rows(p, n, n);
            let v = View::rows(&qkv[base + 2 * d + h * dh..], ld);
            gemm(n, n, dh, F::one(), View::rows(p, n), v, F::zero(), &mut att[b * n * d + h * dh..], d);
        }
    }
    (att, probs)
}

fn attention_backward<F: Real>(datt: &[F], qkv: &[F], probs: &[F], s: &AttnShape) -> Vec<F> {
    let (n, d, dh) = (s.tokens, s.width, s.head_dim());
    let ld = 3 * d;
    let mut dqkv = vec![F::zero(); qkv.len()];
    let mut dp = vec![F::zero(); n * n];
    for b in 0..s.batch {
        let base = b * n * ld;
        for h in 0..s.heads {
            let p = &probs[(b * s.heads + h) * n * n..][..n * n];
            let dout = View::rows(&datt[b * n * d + h * dh..], d);
            let q = View::rows(&qkv[base + h * dh..], ld);
            let k = View::rows(&qkv[base + d + h * dh..], ld);
            let v = View::rows(&qkv[base + 2 * d + h * dh..], ld);
            gemm(n, dh, n, F::one(), dout, v.t(), F::zero(), &mut dp, n);
            gemm(n, n, dh, F::one(), View::rows(p, n).t(), dout, F::zero(), &mut dqkv[base + 2 * d + h * dh..], ld);
            // softmax backward, in place on dp
            for i in 0..n {
                let pr = &p[i * n..(i + 1) * n];
                let dr = &mut dp[i * n..(i + 1) * n];
                let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (g, &pv) in dr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot);
                }
            }
            let ds = View::rows(&dp, n);
            gemm(n, n, dh, s.scale(), ds, k, F::zero(), &mut dqkv[base + h * dh..], ld);
            gemm(n, n, dh, s.scale(), ds.t(), q, F::zero(), &mut dqkv[base + d + h * dh..], ld);
        }
    }
    dqkv
}

fn map<F: Real>(x: &[F], f: impl Fn(F) -> F) -> Vec<F> {
    x.iter().map(|&v| f(v)).collect()
}

impl<F: Real> DenoiserModel<F> {
    pub fn new(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = DitParams::init(&config, rng);
        Self::from_params(config, params)
    }

    /// Wraps existing parameters, checking every tensor shape against `config`.
    pub fn from_params(config: DenoiserConfig, params: DitParams<F>) -> Result<Self> {
        config.validate()?;
        let want = DitParams::<F>::zeros(&config);
        let got = params.named_tensors();
        let exp = want.named_tensors();
        ensure!(got.len() == exp.len(), Shape, "parameter set has {} tensors, config expects {}", got.len(), exp.len());
        for ((gn, gt), (en, et)) in got.iter().zip(&exp) {
            ensure!(
                gn == en && gt.shape == et.shape && gt.data.len() == et.numel(),
                Shape,
                "parameter {gn} {:?} does not match expected {en} {:?}",
                gt.shape,
                et.shape
            );
        }
        let pos = Self::pos_table(&config)?;
        Ok(Self { config, params, pos })
    }

    /// Builds a model from `(name, shape, values)` triples in any order.
    pub fn from_named(config: DenoiserConfig, tensors: Vec<(String, Vec<usize>, Vec<F>)>) -> Result<Self> {
        config.validate()?;
        let mut params = DitParams::<F>::zeros(&config);
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut slots: Vec<Option<(Vec<usize>, Vec<F>)>> = vec![None; names.len()];
        for (name, shape, data) in tensors {
            let i = names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Shape(format!("unexpected parameter {name}")))?;
            ensure!(slots[i].is_none(), Shape, "duplicate parameter {name}");
            slots[i] = Some((shape, data));
        }
        for ((t, slot), name) in params.tensors_mut().into_iter().zip(slots).zip(&names) {
            let (shape, data) = slot.ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
            ensure!(
                shape == t.shape && data.len() == t.numel(),
                Shape,
                "parameter {name} has shape {shape:?}, expected {:?}",
                t.shape
            );
            t.data = data;
        }
        Self::from_params(config, params)
    }

    fn pos_table(config: &DenoiserConfig) -> Result<Vec<F>> {
        let table = build_pos_embed(&config.grid_layout()?, config.patch, config.width, config.pos_scheme)?;
        Ok(table.values.iter().map(|&v| F::of(v)).collect())
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn cast<G: Real>(&self) -> DenoiserModel<G> {
        DenoiserModel {
            config: self.config.clone(),
            params: self.params.cast(),
            pos: self.pos.iter().map(|v| G::of(v.f64())).collect(),
        }
    }

    fn check_inputs(&self, x_t: &[Image], t: &[usize], cond: Option<&[Image]>) -> Result<()> {
        let cfg = &self.config;
        ensure!(!x_t.is_empty(), InvalidArgument, "empty batch");
        ensure!(t.len() == x_t.len(), Shape, "{} timesteps for a batch of {}", t.len(), x_t.len());
        let want = (cfg.input_channels, cfg.input_size, cfg.input_size);
        for (i, x) in x_t.iter().enumerate() {
            ensure!(x.shape() == want, Shape, "input {i} has shape {:?}, model expects {want:?}", x.shape());
        }
        match (cfg.conditional, cond) {
            (true, None) => return Err(Error::InvalidArgument("conditional model needs a condition".into())),
            (false, Some(_)) => return Err(Error::InvalidArgument("unconditional model was given a condition".into())),
            (true, Some(c)) => {
                ensure!(c.len() == x_t.len(), Shape, "{} conditions for a batch of {}", c.len(), x_t.len());
                for (x, y) in x_t.iter().zip(c) {
                    y.ensure_same_shape(x, "condition")?;
                }
            }
            (false, None) => {}
        }
        Ok(())
    }

    fn forward_cached(&self, x_t: &[Image], t: &[usize], cond: Option<&[Image]>) -> Result<(Vec<F>, Cache<F>)> {
        self.check_inputs(x_t, t, cond)?;
        let cfg = &self.config;
        let p = &self.params;
        let (bsz, n, d, pd) = (x_t.len(), cfg.tokens(), cfg.width, cfg.patch_dim());
        let rows = bsz * n;
        let pin = p.patch_in.in_dim();

        let mut xin = vec![F::zero(); rows * pin];
        for (b, x) in x_t.iter().enumerate() {
            patchify_into(x, cfg.patch, &mut xin[b * n * pin..], pin);
            if let Some(c) = cond {
                patchify_into(&c[b], cfg.patch, &mut xin[b * n * pin + pd..], pin);
            }
        }
        let mut h = p.patch_in.forward(&xin, rows);
        for r in 0..rows {
            let pe = &self.pos[(r % n) * d..][..d];
            for (v, &e) in h[r * d..(r + 1) * d].iter_mut().zip(pe) {
                *v += e;
            }
        }

        let mut temb = Vec::with_capacity(bsz * cfg.time_dim);
        for &ti in t {
            temb.extend(sincos_1d(ti as f64, cfg.time_dim)?.into_iter().map(F::of));
        }
        let a1 = p.t_fc1.forward(&temb, bsz);
        let s1 = map(&a1, silu);
        let mut c = p.t_fc2.forward(&s1, bsz);
        let pooled = match (&p.cond_pool, cond) {
            (Some(pool), Some(_)) => {
                let mut pooled = vec![F::zero(); bsz * pd];
                let inv = F::of(1.0 / n as f64);
                for b in 0..bsz {
                    for r in 0..n {
                        let src = &xin[(b * n + r) * pin + pd..][..pd];
                        for (o, &v) in pooled[b * pd..(b + 1) * pd].iter_mut().zip(src) {
                            *o += v * inv;
                        }
                    }
                }
                for (o, v) in c.iter_mut().zip(pool.forward(&pooled, bsz)) {
                    *o += v;
                }
                Some(pooled)
            }
            _ => None,
        };
        let sc = map(&c, silu);

        let shape = AttnShape { batch: bsz, tokens: n, width: d, heads: cfg.heads };
        let mut blocks = Vec::with_capacity(p.blocks.len());
        for blk in &p.blocks {
            let modv = blk.modulation.forward(&sc, bsz);
            let s6 = 6 * d;
            let (n1, rstd1) = layer_norm(&h, rows, d);
            let u1 = modulate(&n1, &modv, s6, 0, d, n, d);
            let qkv = blk.qkv.forward(&u1, rows);
            let (att, probs) = attention(&qkv, &shape);
            let a = blk.proj.forward(&att, rows);
            gated_add(&mut h, &a, &modv, s6, 2 * d, n, d);
            let (n2, rstd2) = layer_norm(&h, rows, d);
            let u2 = modulate(&n2, &modv, s6, 3 * d, 4 * d, n, d);
            let f1 = blk.fc1.forward(&u2, rows);
            let g = map(&f1, gelu);
            let f2 = blk.fc2.forward(&g, rows);
            gated_add(&mut h, &f2, &modv, s6, 5 * d, n, d);
            blocks.push(BlockCache { modv, n1, rstd1, u1, qkv, probs, att, a, n2, rstd2, u2, f1, g, f2 });
        }

        let fmod = p.final_mod.forward(&sc, bsz);
        let (nf, rstdf) = layer_norm(&h, rows, d);
        let uf = modulate(&nf, &fmod, 2 * d, 0, d, n, d);
        let out = p.head.forward(&uf, rows);
        let cache = Cache { batch: bsz, xin, temb, a1, s1, c, sc, pooled, blocks, fmod, nf, rstdf, uf };
        Ok((out, cache))
    }

    fn backward(&self, cache: &Cache<F>, dout: &[F]) -> DitParams<F> {
        let cfg = &self.config;
        let p = &self.params;
        let mut g = DitParams::<F>::zeros(cfg);
        let (bsz, n, d) = (cache.batch, cfg.tokens(), cfg.width);
        let rows = bsz * n;
        let shape = AttnShape { batch: bsz, tokens: n, width: d, heads: cfg.heads };

        let duf = p.head.backward(&cache.uf, dout, rows, &mut g.head, true).unwrap();
        let mut dfmod = vec![F::zero(); bsz * 2 * d];
        let dnf = modulate_backward(&duf, &cache.nf, &cache.fmod, &mut dfmod, 2 * d, 0, d, n, d);
        let mut dh = vec![F::zero(); rows * d];
        layer_norm_backward(&dnf, &cache.nf, &cache.rstdf, rows, d, &mut dh);
        let mut dsc = p.final_mod.backward(&cache.sc, &dfmod, bsz, &mut g.final_mod, true).unwrap();

        for ((blk, bc), gb) in p.blocks.iter().zip(&cache.blocks).zip(g.blocks.iter_mut()).rev() {
            let s6 = 6 * d;
            let mut dmodv = vec![F::zero(); bsz * s6];

            let df2 = gated_add_backward(&dh, &bc.f2, &bc.modv, &mut dmodv, s6, 5 * d, n, d);
            let dg = blk.fc2.backward(&bc.g, &df2, rows, &mut gb.fc2, true).unwrap();
            let df1: Vec<F> = dg.iter().zip(&bc.f1).map(|(&a, &x)| a * gelu_grad(x)).collect();
            let du2 = blk.fc1.backward(&bc.u2, &df1, rows, &mut gb.fc1, true).unwrap();
            let dn2 = modulate_backward(&du2, &bc.n2, &bc.modv, &mut dmodv, s6, 3 * d, 4 * d, n, d);
            layer_norm_backward(&dn2, &bc.n2, &bc.rstd2, rows, d, &mut dh);

            let da = gated_add_backward(&dh, &bc.a, &bc.modv, &mut dmodv, s6, 2 * d, n, d);
            let datt = blk.proj.backward(&bc.att, &da, rows, &mut gb.proj, true).unwrap();
            let dqkv = attention_backward(&datt, &bc.qkv, &bc.probs, &shape);
            let du1 = blk.qkv.backward(&bc.u1, &dqkv, rows, &mut gb.qkv, true).unwrap();
            let dn1 = modulate_backward(&du1, &bc.n1, &bc.modv, &mut dmodv, s6, 0, d, n, d);
            layer_norm_backward(&dn1, &bc.n1, &bc.rstd1, rows, d, &mut dh);

            let ds = blk.modulation.backward(&cache.sc, &dmodv, bsz, &mut gb.modulation, true).unwrap();
            for (a, b) in dsc.iter_mut().zip(ds) {
                *a += b;
            }
        }

        p.patch_in.backward(&cache.xin, &dh, rows, &mut g.patch_in, false);
        let dc: Vec<F> = dsc.iter().zip(&cache.c).map(|(&a, &x)| a * silu_grad(x)).collect();
        if let (Some(pool), Some(pooled), Some(gp)) = (&p.cond_pool, &cache.pooled, &mut g.cond_pool) {
            pool.backward(pooled, &dc, bsz, gp, false);
        }
        let ds1 = p.t_fc2.backward(&cache.s1, &dc, bsz, &mut g.t_fc2, true).unwrap();
        let da1: Vec<F> = ds1.iter().zip(&cache.a1).map(|(&a, &x)| a * silu_grad(x)).collect();
        p.t_fc1.backward(&cache.temb, &da1, bsz, &mut g.t_fc1, false);
        g
    }

    fn tokens_to_images(&self, out: &[F], bsz: usize) -> Vec<Image> {
        let cfg = &self.config;
        let (n, pd) = (cfg.tokens(), cfg.patch_dim());
        (0..bsz)
            .map(|b| {
                unpatchify_from(&out[b * n * pd..], pd, cfg.patch, cfg.input_channels, cfg.input_size, cfg.input_size)
            })
            .collect()
    }

    fn images_to_tokens(&self, imgs: &[Image]) -> Result<Vec<F>> {
        let cfg = &self.config;
        let (n, pd) = (cfg.tokens(), cfg.patch_dim());
        let mut out = vec![F::zero(); imgs.len() * n * pd];
        for (b, img) in imgs.iter().enumerate() {
            ensure!(
                img.shape() == (cfg.input_channels, cfg.input_size, cfg.input_size),
                Shape,
                "target {b} has shape {:?}",
                img.shape()
            );
            patchify_into(img, cfg.patch, &mut out[b * n * pd..], pd);
        }
        Ok(out)
    }

    /// Predicted noise for one input.
    pub fn forward(&self, x_t: &Image, t: usize, cond: Option<&Image>) -> Result<Image> {
        let cond = cond.map(std::slice::from_ref);
        let mut out = self.predict(std::slice::from_ref(x_t), &[t], cond)?;
        Ok(out.remove(0))
    }

    /// Parameter gradient of `Σ cotangent ⊙ output` over the batch.
    pub fn output_vjp(
        &self,
        x_t: &[Image],
        t: &[usize],
        cond: Option<&[Image]>,
        cotangent: &[Image],
    ) -> Result<DitParams<F>> {
        ensure!(cotangent.len() == x_t.len(), Shape, "cotangent batch size mismatch");
        let (_, cache) = self.forward_cached(x_t, t, cond)?;
        let dout = self.images_to_tokens(cotangent)?;
        Ok(self.backward(&cache, &dout))
    }
}

impl<F: Real> NoisePredictor for DenoiserModel<F> {
    type Grad = DitParams<F>;

    fn predict(&self, x_t: &[Image], t: &[usize], cond: Option<&[Image]>) -> Result<Vec<Image>> {
        let (out, _) = self.forward_cached(x_t, t, cond)?;
        Ok(self.tokens_to_images(&out, x_t.len()))
    }

    fn mse_and_grad(
        &self,
        x_t: &[Image],
        t: &[usize],
        cond: Option<&[Image]>,
        target: &[Image],
    ) -> Result<(f64, DitParams<F>)> {
        ensure!(target.len() == x_t.len(), Shape, "target batch size mismatch");
        let (out, cache) = self.forward_cached(x_t, t, cond)?;
        let tgt = self.images_to_tokens(target)?;
        let count = out.len() as f64;
        let mut loss = 0.0;
        let scale = F::of(2.0 / count);
        let dout: Vec<F> = out
            .iter()
            .zip(&tgt)
            .map(|(&o, &y)| {
                let diff = o - y;
                loss += diff.f64() * diff.f64();
                diff * scale
            })
            .collect();
        let loss = loss / count;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss}")));
        }
        Ok((loss, self.backward(&cache, &dout)))
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub log_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr_min: 1e-5,
            lr_max: 1e-3,
            warmup_steps: 100,
            log_every: 50,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, InvalidArgument, "batch size must be positive");
        ensure!(self.log_every >= 1, InvalidArgument, "log interval must be positive");
        ensure!(
            self.lr_min >= 0.0 && self.lr_max > 0.0 && self.lr_min.is_finite() && self.lr_max.is_finite(),
            InvalidArgument,
            "learning rates must be finite and positive"
        );
        Ok(())
    }

    /// Linear warmup from `lr_min` to `lr_max` over `warmup_steps`, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            return self.lr_max;
        }
        let f = step as f64 / self.warmup_steps as f64;
        self.lr_min + (self.lr_max - self.lr_min) * f
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    /// Mean loss over the steps since the previous point.
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<LossPoint>,
    pub steps_run: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.curve.first().map(|p| p.loss)
    }
    pub fn final_loss(&self) -> Option<f64> {
        self.curve.last().map(|p| p.loss)
    }
}

/// Training stopped on a non-finite loss or gradient. The model passed to
/// [`train`] is left at the last finite state.
#[derive(Clone, Debug, PartialEq)]
pub struct Diverged {
    pub step: usize,
    pub reason: String,
    pub report: TrainReport,
}

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training diverged at step {}: {}", self.step, self.reason)
    }
}

impl std::error::Error for Diverged {}

#[derive(Debug)]
pub enum TrainError {
    Invalid(Error),
    Diverged(Diverged),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Invalid(e) => e.fmt(f),
            Self::Diverged(d) => d.fmt(f),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        Self::Invalid(e)
    }
}

/// Decoupled-weight-decay Adam over the flat parameter list.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u32,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &DitParams<F>) -> Self {
        let zeros: Vec<Vec<F>> = params.named_tensors().iter().map(|(_, t)| vec![F::zero(); t.numel()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut DitParams<F>, grad: &DitParams<F>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
        let step = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(cfg.adam_eps);
        let decay = F::of(1.0 - lr * cfg.weight_decay);
        let grads = grad.named_tensors();
        for (((p, (_, g)), m), v) in params.tensors_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (F::one() - b1) * gi;
                v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
                let vhat = v[i] * inv_bc2;
                p.data[i] = p.data[i] * decay - step * m[i] / (vhat.sqrt() + eps);
            }
        }
    }
}

/// One mini-batch: clean targets and, for conditional models, their conditions.
pub type Batch = (Vec<Image>, Option<Vec<Image>>);

/// Runs `cfg.steps` optimizer steps. `next_batch` supplies each mini-batch from
/// the training stream.
pub fn train_with<F: Real>(
    model: &mut DenoiserModel<F>,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    mut next_batch: impl FnMut(&mut Rng, usize) -> Result<Batch>,
) -> std::result::Result<TrainReport, TrainError> {
    cfg.validate()?;
    let mut adam = Adam::new(&model.params);
    let mut report = TrainReport::default();
    let mut acc = 0.0;
    let mut acc_n = 0usize;
    for step in 0..cfg.steps {
        let (x0, cond) = next_batch(rng, step)?;
        let sample = match training_loss(&*model, &x0, cond.as_deref(), rng, sched) {
            Ok(s) => s,
            Err(Error::Numerical(reason)) => {
                return Err(TrainError::Diverged(Diverged { step, reason, report }));
            }
            Err(e) => return Err(e.into()),
        };
        let mut grad = sample.grad;
        let norm = grad.sq_norm().sqrt();
        if !norm.is_finite() {
            return Err(TrainError::Diverged(Diverged {
                step,
                reason: format!("non-finite gradient norm {norm}"),
                report,
            }));
        }
        if let Some(clip) = cfg.grad_clip {
            if norm > clip {
                grad.scale(F::of(clip / norm));
            }
        }
        let before = model.params.clone();
        adam.step(&mut model.params, &grad, cfg.lr_at(step), cfg);
        if !model.params.is_finite() {
            model.params = before;
            return Err(TrainError::Diverged(Diverged {
                step,
                reason: "parameter update produced non-finite values".into(),
                report,
            }));
        }
        acc += sample.loss;
        acc_n += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            report.curve.push(LossPoint { step: step + 1, loss: acc / acc_n as f64 });
            log::debug!("step {} loss {:.5}", step + 1, acc / acc_n as f64);
            acc = 0.0;
            acc_n = 0;
        }
        report.steps_run = step + 1;
    }
    Ok(report)
}

/// Trains on a fixed set of targets (and conditions), drawing each mini-batch
/// uniformly with replacement.
pub fn train<F: Real>(
    model: &mut DenoiserModel<F>,
    targets: &[Image],
    conds: Option<&[Image]>,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> std::result::Result<TrainReport, TrainError> {
    ensure!(!targets.is_empty(), InvalidArgument, "training set is empty");
    if let Some(c) = conds {
        ensure!(c.len() == targets.len(), Shape, "{} conditions for {} targets", c.len(), targets.len());
    }
    train_with(model, cfg, sched, rng, |rng, _| {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..targets.len())).collect();
        let x0 = idx.iter().map(|&i| targets[i].clone()).collect();
        let cond = conds.map(|c| idx.iter().map(|&i| c[i].clone()).collect());
        Ok((x0, cond))
    })
}
