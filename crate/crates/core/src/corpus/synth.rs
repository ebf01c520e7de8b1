//! Procedural "real" clips: soft moving blobs over drifting multi-octave
//! value noise, plus faint per-pixel grain.

use super::{Label, VideoClip};
use crate::numerics::rng::derive_seed;
use crate::numerics::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RealConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f32,
    pub grain: f64,
}

impl Default for RealConfig {
    fn default() -> Self {
        Self { frames: 16, height: 32, width: 32, fps: 8.0, grain: 0.01 }
    }
}

const LATTICE: usize = 16;

/// Periodic value-noise octave on a `LATTICE×LATTICE` grid.
struct Octave {
    values: Vec<f64>,
    spacing: f64,
    amplitude: f64,
}

impl Octave {
    fn new(rng: &mut SplitMix64, spacing: f64, amplitude: f64) -> Self {
        Self { values: (0..LATTICE * LATTICE).map(|_| rng.next_f64()).collect(), spacing, amplitude }
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.spacing, y / self.spacing);
        let (fx, fy) = (gx.floor(), gy.floor());
        let (tx, ty) = (smooth(gx - fx), smooth(gy - fy));
        let wrap = |v: f64| (v.rem_euclid(LATTICE as f64)) as usize;
        let (x0, y0) = (wrap(fx), wrap(fy));
        let (x1, y1) = ((x0 + 1) % LATTICE, (y0 + 1) % LATTICE);
        let v = |xi: usize, yi: usize| self.values[yi * LATTICE + xi];
        let top = v(x0, y0) * (1.0 - tx) + v(x1, y0) * tx;
        let bot = v(x0, y1) * (1.0 - tx) + v(x1, y1) * tx;
        self.amplitude * (top * (1.0 - ty) + bot * ty)
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Position moving at constant speed inside `[0, extent]`, bouncing off the
/// borders.
fn reflect(p: f64, extent: f64) -> f64 {
    let period = 2.0 * extent;
    let m = p.rem_euclid(period);
    if m > extent {
        period - m
    } else {
        m
    }
}

struct Blob {
    pos: [f64; 2],
    vel: [f64; 2],
    radius: f64,
    color: [f64; 3],
    alpha: f64,
}

fn color(rng: &mut SplitMix64) -> [f64; 3] {
    [rng.range_f64(0.05, 0.95), rng.range_f64(0.05, 0.95), rng.range_f64(0.05, 0.95)]
}

fn gen_one(seed: u64, index: usize, cfg: &RealConfig) -> VideoClip {
    let mut rng = SplitMix64::new(derive_seed(seed, index as u64));
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let octaves = [
        Octave::new(&mut rng, 16.0, 0.55),
        Octave::new(&mut rng, 8.0, 0.3),
        Octave::new(&mut rng, 4.0, 0.15),
    ];
    let (c_lo, c_hi) = (color(&mut rng), color(&mut rng));
    let angle = rng.range_f64(0.0, std::f64::consts::TAU);
    let speed = rng.range_f64(0.2, 0.8);
    let drift = [speed * angle.cos(), speed * angle.sin()];
    let sway = rng.range_f64(0.0, 0.6);
    let origin = [rng.range_f64(0.0, 64.0), rng.range_f64(0.0, 64.0)];

    let n_blobs = 2 + rng.below(3);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            pos: [rng.range_f64(0.0, w), rng.range_f64(0.0, h)],
            vel: [rng.range_f64(-1.2, 1.2), rng.range_f64(-1.2, 1.2)],
            radius: rng.range_f64(3.0, 7.0),
            color: color(&mut rng),
            alpha: rng.range_f64(0.6, 0.9),
        })
        .collect();

    let (n, hh, ww) = (cfg.frames, cfg.height, cfg.width);
    let mut frames = vec![0f32; n * hh * ww * 3];
    for f in 0..n {
        let t = f as f64;
        let ox = origin[0] + drift[0] * t + sway * (0.7 * t).sin();
        let oy = origin[1] + drift[1] * t;
        let centers: Vec<[f64; 2]> =
            blobs.iter().map(|b| [reflect(b.pos[0] + b.vel[0] * t, w), reflect(b.pos[1] + b.vel[1] * t, h)]).collect();
        for y in 0..hh {
            for x in 0..ww {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let tex: f64 = octaves.iter().map(|o| o.sample(px + ox, py + oy)).sum();
                let mut rgb = [0.0; 3];
                for ch in 0..3 {
                    rgb[ch] = c_lo[ch] + (c_hi[ch] - c_lo[ch]) * tex;
                }
                for (b, c) in blobs.iter().zip(&centers) {
                    let d2 = (px - c[0]).powi(2) + (py - c[1]).powi(2);
                    let a = b.alpha * (-d2 / (2.0 * b.radius * b.radius)).exp();
                    for ch in 0..3 {
                        rgb[ch] = rgb[ch] * (1.0 - a) + b.color[ch] * a;
                    }
                }
                let base = ((f * hh + y) * ww + x) * 3;
                for ch in 0..3 {
                    let v = rgb[ch] + cfg.grain * rng.normal();
                    frames[base + ch] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    VideoClip::new(format!("real_{index:04}"), Label::Real, cfg.fps, [n, hh, ww, 3], frames)
        .expect("generator dimensions are positive")
}

/// `count` clips; clip `i` depends only on `(seed, i)`.
pub fn gen_real(seed: u64, count: usize, cfg: &RealConfig) -> Vec<VideoClip> {
    (0..count).map(|i| gen_one(seed, i, cfg)).collect()
}
