use super::{CorpusError, VideoClip};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    /// Separable Gaussian blur, kernel radius `ceil(3σ)`.
    Blur { sigma: f64 },
    /// Bilinear downscale by `ratio`, then bilinear back to the input size.
    Resize { ratio: f64 },
    /// Clockwise rotation by a multiple of 90 degrees.
    Rotate { degrees: i32 },
    /// Blur, then resize, then rotate.
    Mixed { sigma: f64, ratio: f64, degrees: i32 },
}

impl Perturbation {
    /// Default strength for each kind name: blur σ=3, resize 0.7, rotate 90.
    pub fn from_kind(kind: &str) -> Result<Self, CorpusError> {
        match kind {
            "blur" => Ok(Self::Blur { sigma: 3.0 }),
            "resize" => Ok(Self::Resize { ratio: 0.7 }),
            "rotate" => Ok(Self::Rotate { degrees: 90 }),
            "mixed" => Ok(Self::Mixed { sigma: 3.0, ratio: 0.7, degrees: 90 }),
            other => Err(CorpusError::BadParam(format!("unknown perturbation {other:?}"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Self::Blur { .. } => "blur",
            Self::Resize { .. } => "resize",
            Self::Rotate { .. } => "rotate",
            Self::Mixed { .. } => "mixed",
        }
    }
}

/// Normalised 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>, CorpusError> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(CorpusError::BadParam(format!("blur sigma {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / sum).collect())
}

fn blur(clip: &VideoClip, sigma: f64) -> Result<VideoClip, CorpusError> {
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as i64;
    let (h, w, c) = (clip.h as i64, clip.w as i64, clip.c);
    let mut out = clip.clone();
    let mut tmp = vec![0f64; clip.frame_len()];
    for f in 0..clip.n {
        let src = clip.frame(f);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (i, &kv) in k.iter().enumerate() {
                        let xx = (x + i as i64 - r).clamp(0, w - 1);
                        acc += kv * src[((y * w + xx) as usize) * c + ch] as f64;
                    }
                    tmp[((y * w + x) as usize) * c + ch] = acc;
                }
            }
        }
        let dst = &mut out.frames[f * clip.frame_len()..(f + 1) * clip.frame_len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (i, &kv) in k.iter().enumerate() {
                        let yy = (y + i as i64 - r).clamp(0, h - 1);
                        acc += kv * tmp[((yy * w + x) as usize) * c + ch];
                    }
                    dst[((y * w + x) as usize) * c + ch] = (acc as f32).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear resampling of one `h×w×c` frame with half-pixel centers and
/// clamped borders.
fn bilinear(src: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let mut out = vec![0f32; oh * ow * c];
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch] as f64;
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                out[(y * ow + x) * c + ch] = (top * (1.0 - ty) + bot * ty) as f32;
            }
        }
    }
    out
}

fn resize(clip: &VideoClip, ratio: f64) -> Result<VideoClip, CorpusError> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(CorpusError::BadParam(format!("resize ratio {ratio}")));
    }
    let oh = (clip.h as f64 * ratio).round() as usize;
    let ow = (clip.w as f64 * ratio).round() as usize;
    if oh == 0 || ow == 0 {
        return Err(CorpusError::BadParam(format!("resize ratio {ratio} collapses the frame")));
    }
    let mut out = clip.clone();
    let fl = clip.frame_len();
    for f in 0..clip.n {
        let small = bilinear(clip.frame(f), clip.h, clip.w, clip.c, oh, ow);
        let back = bilinear(&small, oh, ow, clip.c, clip.h, clip.w);
        for (d, v) in out.frames[f * fl..(f + 1) * fl].iter_mut().zip(back) {
            *d = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

fn rotate(clip: &VideoClip, degrees: i32) -> Result<VideoClip, CorpusError> {
    if degrees % 90 != 0 {
        return Err(CorpusError::BadParam(format!("rotation {degrees} is not a multiple of 90")));
    }
    let quarter = (degrees / 90).rem_euclid(4);
    if quarter % 2 == 1 && clip.h != clip.w {
        return Err(CorpusError::BadParam(format!("quarter-turn rotation needs square frames, got {}x{}", clip.h, clip.w)));
    }
    let mut cur = clip.clone();
    for _ in 0..quarter {
        let (n, s, c) = (cur.n, cur.h, cur.c);
        let mut next = cur.clone();
        for f in 0..n {
            let src = cur.frame(f);
            let dst = &mut next.frames[f * s * s * c..(f + 1) * s * s * c];
            // clockwise: out(y, x) = in(s-1-x, y)
            for y in 0..s {
                for x in 0..s {
                    let from = ((s - 1 - x) * s + y) * c;
                    dst[(y * s + x) * c..(y * s + x + 1) * c].copy_from_slice(&src[from..from + c]);
                }
            }
        }
        cur = next;
    }
    Ok(cur)
}

pub fn perturb(clip: &VideoClip, p: &Perturbation) -> Result<VideoClip, CorpusError> {
    match *p {
        Perturbation::Blur { sigma } => blur(clip, sigma),
        Perturbation::Resize { ratio } => resize(clip, ratio),
        Perturbation::Rotate { degrees } => rotate(clip, degrees),
        Perturbation::Mixed { sigma, ratio, degrees } => {
            let b = blur(clip, sigma)?;
            let r = resize(&b, ratio)?;
            rotate(&r, degrees)
        }
    }
}
