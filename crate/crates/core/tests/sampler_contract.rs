mod common;

use std::collections::HashSet;

use common::{WobbleModel, ZeroModel};
use gridit::codec::{IdentityCodec, PixelUnshuffleCodec};
use gridit::diffusion::{build_schedule, respace};
use gridit::rng::{gaussian_image, rng_for, tags};
use gridit::sampler::{assemble_sequence, ControlNoising, FrameTag, Phase, Sampler, SamplerPlan};
use gridit::seqgrid::GridLayout;
use gridit::Image;

fn plan(k: usize, r: usize, n: usize, steps: usize, interpolate: bool) -> SamplerPlan {
    let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
    SamplerPlan {
        layout: GridLayout::new(k, r, 2, 2).unwrap(),
        channels: 3,
        iterations: n,
        sched: respace(&sched, steps).unwrap(),
        seed: 99,
        interpolate,
        control_noising: ControlNoising::TargetLevel,
    }
}

/// Element rows `rows` of a grid with 2-pixel-high elements.
fn rows(img: &Image, rows: std::ops::Range<usize>) -> Image {
    img.crop(rows.start * 2, 0, (rows.end - rows.start) * 2, img.width()).unwrap()
}

#[test]
fn control_rows_are_exact_copies() {
    for (k, r) in [(4, 3), (8, 4), (3, 1)] {
        for n in [2, 3] {
            let p = plan(k, r, n, 20, k >= 3);
            let s = Sampler::new(&WobbleModel, &IdentityCodec, p).unwrap();
            let first = s.first_grid(None).unwrap();
            let grids = s.ar_step1(first, None).unwrap();
            assert_eq!(grids.len(), n);
            for w in grids.windows(2) {
                let got = rows(&w[1], 0..r);
                let want = rows(&w[0], k - r..k);
                assert_eq!(got, want, "K={k} r={r} N={n}");
            }
            let interp = s.interp_step2(&grids, None).unwrap();
            assert_eq!(interp.len(), n - 1);
            for (i, g) in interp.iter().enumerate() {
                assert_eq!(rows(g, 0..1), rows(&grids[i], k - 1..k), "K={k} pair {i} first row");
                assert_eq!(rows(g, k - 1..k), rows(&grids[i + 1], k - 1..k), "K={k} pair {i} last row");
            }
        }
    }
}

#[test]
fn current_level_noising_leaves_a_residual() {
    let mut p = plan(4, 3, 2, 20, false);
    p.control_noising = ControlNoising::CurrentLevel;
    let s = Sampler::new(&WobbleModel, &IdentityCodec, p).unwrap();
    let grids = s.ar_step1(s.first_grid(None).unwrap(), None).unwrap();
    let got = rows(&grids[1], 0..3);
    let want = rows(&grids[0], 1..4);
    assert_ne!(got, want);
}

#[test]
fn single_iteration_returns_the_first_grid() {
    let s = Sampler::new(&WobbleModel, &IdentityCodec, plan(4, 3, 1, 10, false)).unwrap();
    let first = s.first_grid(None).unwrap();
    let out = s.ar_step1(first.clone(), None).unwrap();
    assert_eq!(out, vec![first]);
    assert_eq!(s.generate().unwrap().len(), 16);
}

#[test]
fn frame_accounting_by_provenance() {
    for k in [3usize, 4, 8] {
        for r in [1, k - 1] {
            for n in [1usize, 2, 3, 5] {
                for interpolate in [false, true] {
                    let p = plan(k, r, n, 1, interpolate);
                    let (c, h, w) = (3, p.layout.grid_h(), p.layout.grid_w());
                    let step1: Vec<Image> = (0..n).map(|i| Image::filled(c, h, w, i as f32)).collect();
                    let step2: Vec<Image> = if interpolate {
                        (0..n - 1).map(|i| Image::filled(c, h, w, 100.0 + i as f32)).collect()
                    } else {
                        Vec::new()
                    };
                    let seq = assemble_sequence(&step1, &step2, &p, &IdentityCodec).unwrap();
                    let unique: HashSet<FrameTag> = seq.provenance.iter().copied().collect();
                    assert_eq!(unique.len(), seq.len(), "duplicate provenance");
                    let per_iter = (k - r) * k + if interpolate { (k - 2) * k } else { 0 };
                    assert_eq!(seq.len(), k * k + (n - 1) * per_iter);
                    assert_eq!(seq.len(), p.expected_length());
                    if (k, r, interpolate) == (4, 3, true) {
                        assert_eq!(seq.len(), 16 + 12 * (n - 1));
                    }
                    // frames come from the grids their tags name
                    for (f, tag) in seq.frames.iter().zip(&seq.provenance) {
                        let want = match *tag {
                            FrameTag::Initial { .. } => 0.0,
                            FrameTag::New { iteration, .. } => iteration as f32,
                            FrameTag::Interp { pair, .. } => 100.0 + pair as f32,
                        };
                        assert_eq!(f.at(0, 0, 0), want);
                    }
                }
            }
        }
    }
}

#[test]
fn assembly_order_for_default_plan() {
    let p = plan(4, 3, 2, 1, true);
    let g = |v: f32| Image::from_fn(3, 8, 8, |_, y, x| v + (y / 2 * 4 + x / 2) as f32);
    let seq = assemble_sequence(&[g(0.0), g(100.0)], &[g(200.0)], &p, &IdentityCodec).unwrap();
    let heads: Vec<f32> = seq.frames.iter().map(|f| f.at(0, 0, 0)).collect();
    let mut want: Vec<f32> = (0..16).map(|i| i as f32).collect();
    want.extend((4..12).map(|i| 200.0 + i as f32));
    want.extend((12..16).map(|i| 100.0 + i as f32));
    assert_eq!(heads, want);
}

#[test]
fn count_mismatch_is_rejected() {
    let p = plan(4, 3, 3, 1, true);
    let g = Image::zeros(3, 8, 8);
    assert!(assemble_sequence(&[g.clone(), g.clone()], &[g.clone(), g.clone()], &p, &IdentityCodec).is_err());
    assert!(assemble_sequence(&[g.clone(), g.clone(), g.clone()], &[g.clone()], &p, &IdentityCodec).is_err());
}

#[test]
fn interpolation_needs_k_at_least_three() {
    let p = plan(2, 1, 2, 1, true);
    assert!(Sampler::new(&ZeroModel, &IdentityCodec, p).is_err());
}

/// Algorithm 1 written out directly for K=2, r=1, N=2 with a zero predictor.
#[test]
fn step1_matches_straight_line_transcription() {
    let p = plan(2, 1, 2, 12, false);
    let sched = p.sched.clone();
    let s = Sampler::new(&ZeroModel, &IdentityCodec, p.clone()).unwrap();
    let first = s.first_grid(None).unwrap();
    let grids = s.ar_step1(first.clone(), None).unwrap();

    let (c, h, w) = (3, 4, 4);
    let mut rng = rng_for(p.seed, &[tags::STEP1, 1]);
    let mut x: Vec<f64> = gaussian_image(&mut rng, c, h, w).data().iter().map(|&v| v as f64).collect();
    let prev: Vec<f64> = first.data().iter().map(|&v| v as f64).collect();
    for t in (1..=sched.steps()).rev() {
        let eps: Vec<f64> = if t > 1 {
            gaussian_image(&mut rng, c, h, w).data().iter().map(|&v| v as f64).collect()
        } else {
            vec![0.0; c * h * w]
        };
        let ab_prev = if t == 1 { 1.0 } else { sched.alpha_bar[t - 2] };
        let beta = sched.beta[t - 1];
        let sigma = sched.sigma[t - 1];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let i = (ch * h + y) * w + xx;
                    if y < 2 {
                        // control row: row 1 of the previous grid moved to row 0
                        let src = (ch * h + y + 2) * w + xx;
                        let bar = (ab_prev.sqrt() * prev[src] as f32 as f64
                            + (1.0 - ab_prev).sqrt() * eps[src] as f32 as f64) as f32;
                        x[i] = bar as f64;
                    } else {
                        let mean = (x[i] as f32 as f64) / (1.0 - beta).sqrt();
                        let mut v = mean as f32;
                        if t > 1 {
                            v = (v as f64 + sigma * eps[i]) as f32;
                        }
                        x[i] = v as f64;
                    }
                }
            }
        }
    }
    let want = Image::new(c, h, w, x.iter().map(|&v| v as f32).collect()).unwrap();
    assert_eq!(grids[1], want);
    assert_eq!(rows(&grids[1], 0..1), rows(&first, 1..2));
}

#[test]
fn masked_rows_ignore_the_evolving_complement() {
    let p = plan(4, 3, 2, 15, false);
    let s = Sampler::new(&WobbleModel, &IdentityCodec, p).unwrap();
    let first = s.first_grid(None).unwrap();

    let mut clean: Vec<Image> = Vec::new();
    let mut rec = |_: Phase, _: usize, x: &mut Image| clean.push(rows(x, 0..3));
    let a = s.ar_step1(first.clone(), Some(&mut rec)).unwrap();

    let mut perturbed: Vec<Image> = Vec::new();
    let mut poke = |_: Phase, _: usize, x: &mut Image| {
        for ch in 0..3 {
            for y in 6..8 {
                for xx in 0..8 {
                    let v = x.at(ch, y, xx);
                    x.set(ch, y, xx, v + 0.25);
                }
            }
        }
        perturbed.push(rows(x, 0..3));
    };
    let b = s.ar_step1(first, Some(&mut poke)).unwrap();
    assert_eq!(clean, perturbed);
    assert_ne!(rows(&a[1], 3..4), rows(&b[1], 3..4));
}

#[test]
fn generation_is_deterministic() {
    let p = plan(4, 3, 3, 8, true);
    let run = || Sampler::new(&WobbleModel, &IdentityCodec, p.clone()).unwrap().generate().unwrap();
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.len(), 16 + 12 * 2);
}

#[test]
fn latent_codec_rows_follow_scale_factor() {
    let mut p = plan(4, 3, 2, 6, true);
    p.layout = GridLayout::new(4, 3, 4, 4).unwrap();
    let codec = PixelUnshuffleCodec { factor: 2 };
    let s = Sampler::new(&WobbleModel, &codec, p).unwrap();
    assert_eq!(s.latent_shape(), (12, 8, 8));
    let seq = s.generate().unwrap();
    assert_eq!(seq.len(), 28);
    assert_eq!(seq.frames[0].shape(), (3, 4, 4));
    // the control copy of the newest row of grid 0 equals the grid-1 copy, so
    // frame 12 reappears nowhere else
    let frames = &seq.frames;
    assert!(frames[24..].iter().all(|f| f != &frames[12]));
}
