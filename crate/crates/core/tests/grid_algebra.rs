use gridit::denoiser::{patchify, unpatchify};
use gridit::seqgrid::{
    compose_rows, make_masks, pack_grid, resample_frame, row_shift, unpack_grid, GridLayout, MaskMode, MaskSet,
};
use gridit::Image;
use proptest::prelude::*;

fn image_strategy(c: usize, h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(-2.0f32..2.0, c * h * w).prop_map(move |d| Image::new(c, h, w, d).unwrap())
}

fn frames_strategy(k: usize, eh: usize, ew: usize) -> impl Strategy<Value = Vec<Image>> {
    prop::collection::vec(image_strategy(3, eh, ew), k * k)
}

/// Direct 2D bicubic evaluation at one output pixel, written from the kernel
/// definition without the separable decomposition.
fn bicubic_at(img: &Image, c: usize, oy: usize, ox: usize, out_h: usize, out_w: usize) -> f64 {
    fn kernel(x: f64) -> f64 {
        let a = -0.5;
        let x = x.abs();
        if x < 1.0 {
            (a + 2.0) * x.powi(3) - (a + 3.0) * x * x + 1.0
        } else if x < 2.0 {
            a * x.powi(3) - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
        } else {
            0.0
        }
    }
    let (_, h, w) = img.shape();
    let sy = (oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
    let sx = (ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
    let (by, bx) = (sy.floor() as isize, sx.floor() as isize);
    let mut acc = 0.0;
    for dy in -1..=2isize {
        for dx in -1..=2isize {
            let yy = (by + dy).clamp(0, h as isize - 1) as usize;
            let xx = (bx + dx).clamp(0, w as isize - 1) as usize;
            let wgt = kernel(sy - (by + dy) as f64) * kernel(sx - (bx + dx) as f64);
            acc += wgt * img.at(c, yy, xx) as f64;
        }
    }
    acc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pack_unpack_round_trip(k in 1usize..5, eh in 1usize..6, ew in 1usize..6, seed in any::<u64>()) {
        let frames: Vec<Image> = (0..k * k)
            .map(|n| Image::from_fn(3, eh, ew, |c, y, x| ((seed as usize + n * 31 + c * 7 + y * 5 + x) % 97) as f32 / 96.0))
            .collect();
        let layout = GridLayout::new(k, 0, eh, ew).unwrap();
        let grid = pack_grid(&frames, layout, 5).unwrap();
        prop_assert_eq!(unpack_grid(&grid).unwrap(), frames);
        prop_assert_eq!(grid.index_of(k - 1, k - 1), 5 + k * k - 1);
    }

    #[test]
    fn pack_unpack_random_values(frames in frames_strategy(3, 2, 3)) {
        let layout = GridLayout::new(3, 1, 2, 3).unwrap();
        let grid = pack_grid(&frames, layout, 0).unwrap();
        prop_assert_eq!(unpack_grid(&grid).unwrap(), frames);
    }

    #[test]
    fn row_shift_moves_last_rows(k in 2usize..7, r_frac in 0.0f64..1.0, seed in any::<u32>()) {
        let r = 1 + ((k - 1) as f64 * r_frac) as usize;
        let r = r.min(k);
        let layout = GridLayout::new(k, r, 2, 3).unwrap();
        let x = Image::from_fn(2, layout.grid_h(), layout.grid_w(), |c, y, xx| ((seed as usize + c * 1000 + y * 37 + xx) % 251) as f32);
        let s = row_shift(&x, &layout).unwrap();
        for i in 0..k {
            for y in 0..2 {
                for xx in 0..layout.grid_w() {
                    for c in 0..2 {
                        let got = s.at(c, i * 2 + y, xx);
                        if i < r {
                            prop_assert_eq!(got, x.at(c, (i + k - r) * 2 + y, xx));
                        } else {
                            prop_assert_eq!(got, 0.0);
                        }
                    }
                }
            }
        }
        if r == k {
            prop_assert_eq!(s, x);
        }
    }

    #[test]
    fn step1_mask_and_complement_partition(k in 2usize..9, r_frac in 0.0f64..1.0) {
        let r = 1 + ((k - 2) as f64 * r_frac) as usize;
        let layout = GridLayout::new(k, r, 1, 1).unwrap();
        let MaskSet::Step1(m) = make_masks(&layout, MaskMode::Step1).unwrap() else { panic!() };
        let c = m.complement();
        let total: usize = m.values().iter().zip(c.values()).map(|(&a, b)| (a + b) as usize).sum();
        prop_assert_eq!(total, k * k);
        prop_assert_eq!(m.values().iter().filter(|&&v| v == 1).count(), r * k);
    }

    #[test]
    fn step2_masks_partition(k in 3usize..9) {
        let layout = GridLayout::new(k, 1, 1, 1).unwrap();
        let MaskSet::Step2 { prev, current, next } = make_masks(&layout, MaskMode::Step2).unwrap() else { panic!() };
        for n in 0..k * k {
            let s = prev.values()[n] + current.values()[n] + next.values()[n];
            prop_assert_eq!(s, 1);
        }
    }

    #[test]
    fn blend_selects_rows_exactly(on in image_strategy(3, 8, 4), off in image_strategy(3, 8, 4)) {
        let layout = GridLayout::new(4, 3, 2, 1).unwrap();
        let MaskSet::Step1(m) = make_masks(&layout, MaskMode::Step1).unwrap() else { panic!() };
        let b = m.blend(&on, &off, &layout).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..4 {
                    let want = if y / 2 < 3 { on.at(c, y, x) } else { off.at(c, y, x) };
                    prop_assert_eq!(b.at(c, y, x).to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn patchify_round_trip(x in image_strategy(3, 8, 8), p in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let t = patchify(&x, p).unwrap();
        prop_assert_eq!(unpatchify(&t, p, 3, 8).unwrap(), x);
    }

    #[test]
    fn bicubic_matches_direct_convolution(
        x in image_strategy(1, 7, 9),
        oh in 1usize..20,
        ow in 1usize..20,
    ) {
        let out = resample_frame(&x, oh, ow).unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                let want = if (oh, ow) == (7, 9) { x.at(0, oy, ox) as f64 } else { bicubic_at(&x, 0, oy, ox, oh, ow) };
                prop_assert!((out.at(0, oy, ox) as f64 - want).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn bicubic_constant_and_range() {
    let c = Image::filled(3, 5, 5, 0.3);
    let up = resample_frame(&c, 20, 20).unwrap();
    assert!(up.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    let checker = Image::from_fn(1, 8, 8, |_, y, x| ((x + y) % 2) as f32);
    let up = resample_frame(&checker, 32, 32).unwrap();
    let (lo, hi) = up.min_max();
    assert!(lo >= 0.0 && hi <= 1.0, "overshoot must be clamped for [0,1] inputs");
}

#[test]
fn compose_rejects_overlap() {
    let layout = GridLayout::new(3, 1, 1, 1).unwrap();
    let MaskSet::Step2 { prev, current, .. } = make_masks(&layout, MaskMode::Step2).unwrap() else { panic!() };
    let img = Image::zeros(1, 3, 3);
    assert!(compose_rows(&[(&prev, &img), (&prev, &img), (&current, &img)], &layout).is_err());
    assert!(compose_rows(&[(&prev, &img), (&current, &img)], &layout).is_err());
}
