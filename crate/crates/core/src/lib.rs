//! Image-sequence generation with diffusion models over grid images.
//!
//! A sequence of `K²` frames is packed row-major into one `K×K` grid image.
//! A DiT-style noise predictor is trained on such grids and sampled with
//! row-masked inpainting to extend and interpolate sequences. A second
//! conditional model upsamples frames, and a noisy volume can be denoised by
//! the same grid machinery.

pub mod error;
pub mod image;
pub mod rng;

pub mod codec;
pub mod denoiser;
pub mod diffusion;
pub mod eval;
pub mod nn;
pub mod posembed;
pub mod sampler;
pub mod seqgrid;
pub mod sr_stage;
pub mod voldenoise;

pub use error::{Error, Result};
pub use image::{Image, Sequence};
