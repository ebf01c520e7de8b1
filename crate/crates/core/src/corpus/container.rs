//! `"MMDV"` | version u32 | N, H, W, C u32 | fps f32 | label u8 | f32 pixels,
//! all little-endian.

use std::path::Path;

use super::{CorpusError, Label, VideoClip};
use crate::binio::{put_f32s, put_u32, Reader, Truncated};

const MAGIC: &[u8; 4] = b"MMDV";
const VERSION: u32 = 1;

impl From<Truncated> for CorpusError {
    fn from(t: Truncated) -> Self {
        CorpusError::TruncatedFile { offset: t.offset }
    }
}

pub fn clip_to_bytes(clip: &VideoClip) -> Vec<u8> {
    let mut out = Vec::with_capacity(29 + clip.frames.len() * 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for d in clip.dims() {
        put_u32(&mut out, d as u32);
    }
    out.extend_from_slice(&clip.fps.to_le_bytes());
    out.push(clip.label.as_u8());
    put_f32s(&mut out, &clip.frames);
    out
}

/// Parses a container; `id` is supplied by the caller (usually the file stem).
pub fn clip_from_bytes(buf: &[u8], id: &str) -> Result<VideoClip, CorpusError> {
    let mut r = Reader::new(buf);
    if r.take(4).map_err(|_| CorpusError::BadMagic)? != MAGIC {
        return Err(CorpusError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CorpusError::InvalidHeader(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(CorpusError::InvalidHeader(format!("zero extent in {dims:?}")));
    }
    let fps = r.f32()?;
    if !(fps.is_finite() && fps > 0.0) {
        return Err(CorpusError::InvalidHeader(format!("fps {fps}")));
    }
    let label = r.u8()?;
    let label = Label::from_u8(label).ok_or_else(|| CorpusError::InvalidHeader(format!("label byte {label}")))?;
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| CorpusError::InvalidHeader("dimensions overflow".into()))?;
    let frames = r.f32_vec(count)?;
    if r.remaining() != 0 {
        return Err(CorpusError::InvalidHeader(format!("{} trailing bytes", r.remaining())));
    }
    VideoClip::new(id, label, fps, dims, frames)
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<(), CorpusError> {
    std::fs::write(path, clip_to_bytes(clip)).map_err(|e| CorpusError::io(path, e))
}

pub fn read_clip(path: &Path) -> Result<VideoClip, CorpusError> {
    let buf = std::fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("clip");
    clip_from_bytes(&buf, id)
}
