mod common;

use common::{WobbleModel, ZeroModel};
use gridit::codec::IdentityCodec;
use gridit::diffusion::{build_schedule, respace, SamplingSchedule};
use gridit::eval::psnr_frames;
use gridit::seqgrid::GridLayout;
use gridit::voldenoise::{denoise_volume, DenoiseMode, NoisyVolume, Refiner};
use gridit::{Image, Sequence};

fn sched(steps: usize) -> SamplingSchedule {
    respace(&build_schedule(1000, 1e-4, 0.02).unwrap(), steps).unwrap()
}

fn volume(n: usize, c: usize, size: usize) -> NoisyVolume {
    let frames = (0..n)
        .map(|i| Image::from_fn(c, size, size, |ch, y, x| ((i * 7 + ch * 3 + y + x) % 20) as f32 / 19.0))
        .collect();
    NoisyVolume::new(Sequence::new(frames).unwrap(), Some(12.0))
}

fn run(vol: &NoisyVolume, layout: GridLayout, s: &SamplingSchedule, mode: DenoiseMode) -> Sequence {
    denoise_volume::<_, ZeroModel>(&WobbleModel, None, vol, &layout, &IdentityCodec, s, mode, 7).unwrap()
}

#[test]
fn start_below_the_chain_is_a_no_op() {
    let vol = volume(20, 3, 4);
    let layout = GridLayout::new(4, 3, 4, 4).unwrap();
    let out = run(&vol, layout, &sched(50), DenoiseMode::Sdedit { t_star: 1 });
    assert_eq!(out.len(), 20);
    let p = psnr_frames(out.frames(), vol.frames.frames()).unwrap();
    assert!(p > 40.0, "psnr {p}");
    assert_eq!(out.frames(), vol.frames.frames());
}

#[test]
fn length_and_order_are_preserved() {
    let vol = volume(37, 3, 4);
    let layout = GridLayout::new(4, 3, 4, 4).unwrap();
    let out = run(&vol, layout, &sched(10), DenoiseMode::Sdedit { t_star: 200 });
    assert_eq!(out.len(), 37);
    // each output frame stays closest to its own input
    for (i, f) in out.frames().iter().enumerate() {
        let own = psnr_frames(std::slice::from_ref(f), &vol.frames.frames()[i..=i]).unwrap();
        let other = psnr_frames(std::slice::from_ref(f), &vol.frames.frames()[(i + 1) % 37..=(i + 1) % 37]).unwrap();
        assert!(own > other, "frame {i}");
    }
}

#[test]
fn denoising_is_deterministic() {
    let vol = volume(16, 3, 4);
    let layout = GridLayout::new(4, 3, 4, 4).unwrap();
    let s = sched(20);
    let mode = DenoiseMode::Sdedit { t_star: 300 };
    assert_eq!(run(&vol, layout, &s, mode), run(&vol, layout, &s, mode));
}

#[test]
fn literal_mode_runs() {
    let vol = volume(16, 3, 4);
    let layout = GridLayout::new(4, 3, 4, 4).unwrap();
    let out = run(&vol, layout, &sched(5), DenoiseMode::Literal);
    assert_eq!(out.len(), 16);
    assert!(out.frames().iter().all(Image::is_finite));
}

#[test]
fn gray_volumes_come_back_gray() {
    let vol = volume(16, 1, 4);
    let layout = GridLayout::new(4, 3, 4, 4).unwrap();
    let out = run(&vol, layout, &sched(5), DenoiseMode::Sdedit { t_star: 100 });
    assert_eq!(out.frame_shape(), (1, 4, 4));
}

#[test]
fn small_elements_are_brought_back_to_frame_size() {
    let vol = volume(16, 3, 8);
    let layout = GridLayout::new(4, 3, 4, 4).unwrap();
    let s = sched(5);
    let mode = DenoiseMode::Sdedit { t_star: 100 };
    let plain = run(&vol, layout, &s, mode);
    assert_eq!(plain.frame_shape(), (3, 8, 8));
    let refiner = Refiner { model: &WobbleModel, sched: &s };
    let refined = denoise_volume(&WobbleModel, Some(refiner), &vol, &layout, &IdentityCodec, &s, mode, 7).unwrap();
    assert_eq!(refined.frame_shape(), (3, 8, 8));
    assert_ne!(plain, refined);
}

#[test]
fn short_volumes_are_rejected() {
    let vol = volume(15, 3, 4);
    let layout = GridLayout::new(4, 3, 4, 4).unwrap();
    let r = denoise_volume::<_, ZeroModel>(
        &WobbleModel,
        None,
        &vol,
        &layout,
        &IdentityCodec,
        &sched(5),
        DenoiseMode::default(),
        1,
    );
    assert!(r.is_err());
    let r = denoise_volume::<_, ZeroModel>(
        &WobbleModel,
        None,
        &volume(16, 3, 4),
        &layout,
        &IdentityCodec,
        &sched(5),
        DenoiseMode::Sdedit { t_star: 0 },
        1,
    );
    assert!(r.is_err());
}
