//! Frame folders: 8-bit PNG frames plus a JSON manifest listing them in order.
//!
//! ```json
//! { "frames": ["frame_00000.png", ...], "height": 64, "width": 64,
//!   "channels": 3, "frame_rate": null }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use gridit::{Image, Sequence};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    #[serde(default)]
    pub frame_rate: Option<f64>,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Frame { path: path.to_path_buf(), message: e.to_string() })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(frame: &Image, path: &Path) -> Result<()> {
    let (c, h, w) = frame.shape();
    let n = h * w;
    let err = |e: image::ImageError| HarnessError::Frame { path: path.to_path_buf(), message: e.to_string() };
    if c == 1 {
        let buf: Vec<u8> = frame.data().iter().map(|&v| quantize(v)).collect();
        image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to frame").save(path).map_err(err)
    } else {
        let d = frame.data();
        let buf: Vec<u8> = (0..n).flat_map(|i| (0..3).map(move |ch| quantize(d[ch * n + i]))).collect();
        image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to frame").save(path).map_err(err)
    }
}

pub fn load_png(path: &Path, channels: usize) -> Result<Image> {
    let img =
        image::open(path).map_err(|e| HarnessError::Frame { path: path.to_path_buf(), message: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let out = if channels == 1 {
        let g = img.to_luma8();
        Image::new(1, h, w, g.as_raw().iter().map(|&v| v as f32 / 255.0).collect())?
    } else {
        let rgb = img.to_rgb8();
        let raw = rgb.as_raw();
        let mut data = vec![0.0f32; 3 * n];
        for i in 0..n {
            for ch in 0..3 {
                data[ch * n + i] = raw[i * 3 + ch] as f32 / 255.0;
            }
        }
        Image::new(3, h, w, data)?
    };
    Ok(out)
}

/// Writes every frame as `frame_NNNNN.png` and a manifest into `dir`.
pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let (c, h, w) = seq.frame_shape();
    let mut names = Vec::with_capacity(seq.len());
    for (i, f) in seq.frames().iter().enumerate() {
        let name = format!("frame_{i:05}.png");
        save_png(f, &dir.join(&name))?;
        names.push(name);
    }
    let manifest = Manifest { frames: names, height: h, width: w, channels: c, frame_rate: seq.frame_rate_hint };
    let path = dir.join(MANIFEST);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Loads the frames listed by `manifest` (default `dir/manifest.json`) in
/// manifest order.
pub fn load_frame_folder(dir: &Path, manifest: Option<&Path>) -> Result<Sequence> {
    let mpath = manifest.map(Path::to_path_buf).unwrap_or_else(|| dir.join(MANIFEST));
    let m: Manifest = read_json(&mpath)?;
    if m.frames.is_empty() {
        return Err(HarnessError::Frame { path: mpath, message: "manifest lists no frames".into() });
    }
    if m.channels != 1 && m.channels != 3 {
        return Err(HarnessError::Frame { path: mpath, message: format!("unsupported channel count {}", m.channels) });
    }
    let mut frames = Vec::with_capacity(m.frames.len());
    for name in &m.frames {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(HarnessError::Frame { path, message: "frame listed in manifest is missing".into() });
        }
        let f = load_png(&path, m.channels)?;
        if (f.height(), f.width()) != (m.height, m.width) {
            return Err(HarnessError::Frame {
                path,
                message: format!("frame is {}x{}, manifest says {}x{}", f.height(), f.width(), m.height, m.width),
            });
        }
        frames.push(f);
    }
    let seq = Sequence::new(frames)?;
    match m.frame_rate {
        Some(r) => Ok(seq.with_frame_rate(r)?),
        None => Ok(seq),
    }
}

/// Sub-directories of `root` that contain a manifest, sorted by name.
pub fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(MANIFEST).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| HarnessError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(HarnessError::Frame { path: root.to_path_buf(), message: "no frame folders found".into() });
    }
    Ok(dirs)
}

pub fn load_sequences(root: &Path) -> Result<Vec<Sequence>> {
    sequence_dirs(root)?.iter().map(|d| load_frame_folder(d, None)).collect()
}
