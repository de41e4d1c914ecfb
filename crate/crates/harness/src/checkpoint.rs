//! Binary model checkpoints. All integers and floats are little-endian.
//!
//! | field            | encoding                                              |
//! |------------------|-------------------------------------------------------|
//! | magic            | `b"GRDT"`                                             |
//! | version          | `u32`                                                 |
//! | config block     | `u32` byte length, UTF-8 JSON of [`CheckpointMeta`]   |
//! | tensor count     | `u32`                                                 |
//! | per tensor       | `u32` name length, name bytes, `u32` rank, `u32` dims, |
//! |                  | `f32` values in row-major order                       |
//! | schedule         | `u32` steps, `f64` beta start, `f64` beta end,        |
//! |                  | `u8` sigma kind (0 posterior, 1 beta)                 |
//! | checksum         | `u32` CRC-32 of every preceding byte                  |
//!
//! The checksum is verified before the version, so a damaged file always
//! reports corruption.

use std::fs;
use std::path::Path;

use gridit::denoiser::{DenoiserConfig, DenoiserModel};
use gridit::diffusion::{build_schedule_with, NoiseSchedule, ScheduleParams, SigmaKind};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"GRDT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `stage1` or `stage2`.
    pub role: String,
    pub model: DenoiserConfig,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: DenoiserModel<f32>,
    pub sched: NoiseSchedule,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(model: &DenoiserModel<f32>, role: &str, sched: &ScheduleParams) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let meta = CheckpointMeta { role: role.to_string(), model: model.config().clone() };
    let json = serde_json::to_vec(&meta)?;
    put_u32(&mut buf, json.len() as u32);
    buf.extend_from_slice(&json);
    let tensors = model.params.named_tensors();
    put_u32(&mut buf, tensors.len() as u32);
    for (name, t) in tensors {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape.len() as u32);
        for &d in &t.shape {
            put_u32(&mut buf, d as u32);
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_u32(&mut buf, sched.steps as u32);
    buf.extend_from_slice(&sched.beta_start.to_le_bytes());
    buf.extend_from_slice(&sched.beta_end.to_le_bytes());
    buf.push(match sched.sigma {
        SigmaKind::Posterior => 0,
        SigmaKind::Beta => 1,
    });
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    Ok(buf)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| HarnessError::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 {
        return Err(HarnessError::Checksum(format!("file is truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(HarnessError::Format("missing GRDT magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(HarnessError::Checksum(format!("CRC-32 is {actual:08x}, header says {stored:08x}")));
    }
    let mut r = Reader { data: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(HarnessError::Version { found: version, expected: VERSION });
    }
    let n = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(n)?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| HarnessError::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let len: usize = dims.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| HarnessError::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push((name, dims, data));
    }
    let steps = r.u32()? as usize;
    let beta_start = r.f64()?;
    let beta_end = r.f64()?;
    let sigma = match r.take(1)?[0] {
        0 => SigmaKind::Posterior,
        1 => SigmaKind::Beta,
        k => return Err(HarnessError::Format(format!("unknown sigma kind {k}"))),
    };
    if r.pos != body.len() {
        return Err(HarnessError::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let model = DenoiserModel::from_named(meta.model.clone(), tensors)?;
    let sched = build_schedule_with(ScheduleParams { steps, beta_start, beta_end, sigma })?;
    Ok(Checkpoint { meta, model, sched })
}

pub fn save_checkpoint(model: &DenoiserModel<f32>, role: &str, sched: &ScheduleParams, path: &Path) -> Result<()> {
    let bytes = encode(model, role, sched)?;
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode(&bytes)
}
