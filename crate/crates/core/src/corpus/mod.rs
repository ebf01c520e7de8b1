//! Synthetic video corpus: clips, container files, manifests and
//! perturbations used for robustness runs.

mod container;
mod fake;
mod manifest;
mod perturb;
mod synth;

pub use container::{read_clip, write_clip, clip_from_bytes, clip_to_bytes};
pub use fake::{fake_id, gen_fake, DEFAULT_MSE_BOUND};
pub use manifest::{Manifest, ManifestEntry, Split, MANIFEST_FILE};
pub use perturb::{gaussian_kernel, perturb, Perturbation};
pub use synth::{gen_real, RealConfig};

use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("not a video container (bad magic)")]
    BadMagic,
    #[error("invalid container header: {0}")]
    InvalidHeader(String),
    #[error("file truncated at byte offset {offset}")]
    TruncatedFile { offset: usize },
    #[error("bad parameter: {0}")]
    BadParam(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CorpusError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CorpusError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "real" => Some(Label::Real),
            "fake" => Some(Label::Fake),
            _ => None,
        }
    }

    /// 1.0 for fake, 0.0 for real.
    pub fn target(self) -> f32 {
        self.as_u8() as f32
    }
}

/// `n` frames of `h×w×c` pixels in `[0,1]`, stored frame-major, row-major,
/// channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub label: Label,
    pub fps: f32,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub frames: Vec<f32>,
}

impl VideoClip {
    pub fn new(id: impl Into<String>, label: Label, fps: f32, dims: [usize; 4], frames: Vec<f32>) -> Result<Self, CorpusError> {
        let [n, h, w, c] = dims;
        if dims.iter().any(|&d| d == 0) {
            return Err(CorpusError::InvalidHeader(format!("zero extent in {dims:?}")));
        }
        if frames.len() != n * h * w * c {
            return Err(CorpusError::InvalidHeader(format!("{} values for dims {dims:?}", frames.len())));
        }
        Ok(Self { id: id.into(), label, fps, n, h, w, c, frames })
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i * self.frame_len()..(i + 1) * self.frame_len()]
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    /// Frames `start..start+len` as a `[len×C×H×W]` tensor.
    pub fn to_nchw(&self, start: usize, len: usize) -> Tensor {
        let (h, w, c) = (self.h, self.w, self.c);
        let mut out = vec![0.0; len * c * h * w];
        for f in 0..len {
            let src = self.frame(start + f);
            let dst = &mut out[f * c * h * w..(f + 1) * c * h * w];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        dst[(ch * h + y) * w + x] = src[(y * w + x) * c + ch];
                    }
                }
            }
        }
        Tensor::new(&[len, c, h, w], out).expect("positive extents")
    }

    /// Inverse of [`VideoClip::to_nchw`] over the whole clip.
    pub fn from_nchw(id: impl Into<String>, label: Label, fps: f32, t: &Tensor) -> Result<Self, CorpusError> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(CorpusError::InvalidHeader(format!("expected rank 4, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = t.data();
        let mut frames = vec![0.0; n * h * w * c];
        for f in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        frames[((f * h + y) * w + x) * c + ch] = src[((f * c + ch) * h + y) * w + x];
                    }
                }
            }
        }
        Self::new(id, label, fps, [n, h, w, c], frames)
    }

    /// Center crop to `size×size`.
    pub fn center_crop(&self, size: usize) -> Result<Self, CorpusError> {
        if size == 0 || size > self.h || size > self.w {
            return Err(CorpusError::BadParam(format!("crop {size} for {}x{} frames", self.h, self.w)));
        }
        if size == self.h && size == self.w {
            return Ok(self.clone());
        }
        let (y0, x0) = ((self.h - size) / 2, (self.w - size) / 2);
        let mut frames = Vec::with_capacity(self.n * size * size * self.c);
        for f in 0..self.n {
            let src = self.frame(f);
            for y in y0..y0 + size {
                let row = &src[((y * self.w) + x0) * self.c..((y * self.w) + x0 + size) * self.c];
                frames.extend_from_slice(row);
            }
        }
        Self::new(self.id.clone(), self.label, self.fps, [self.n, size, size, self.c], frames)
    }

    /// Frames `start..start+len` as a new clip.
    pub fn window(&self, start: usize, len: usize) -> Result<Self, CorpusError> {
        if len == 0 || start + len > self.n {
            return Err(CorpusError::BadParam(format!("window {start}+{len} of {} frames", self.n)));
        }
        let fl = self.frame_len();
        let frames = self.frames[start * fl..(start + len) * fl].to_vec();
        Self::new(self.id.clone(), self.label, self.fps, [len, self.h, self.w, self.c], frames)
    }

    /// Mean over consecutive frame pairs of the per-pixel squared difference.
    pub fn inter_frame_mse(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for f in 1..self.n {
            let (a, b) = (self.frame(f - 1), self.frame(f));
            let se: f64 = a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
            total += se / a.len() as f64;
        }
        total / (self.n - 1) as f64
    }
}
