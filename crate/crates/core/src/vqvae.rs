//! Vector-quantised autoencoder whose reconstruction residual exposes
//! generator traces, and which also synthesises the fake corpus.

use std::path::Path;

use log::debug;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::corpus::{CorpusError, VideoClip};
use crate::kv::{KvError, KvMap};
use crate::layers::{Conv2d, ConvTranspose2d};
use crate::numerics::{Adam, AdamConfig, GradBuffer, NumericsError, ParamId, ParamStore, Session, SplitMix64, Tensor, Var};

#[derive(Debug, Error)]
pub enum VqError {
    #[error("frame {h}x{w} is not divisible by the downsample factor {factor}")]
    ShapeNotDivisible { h: usize, w: usize, factor: usize },
    #[error("latent width {found} does not match codebook width {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no training frames")]
    EmptyCorpus,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("model reconstruction MSE {mse:.5} exceeds sanity bound {bound}")]
    UntrainedModel { mse: f64, bound: f64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl From<KvError> for VqError {
    fn from(e: KvError) -> Self {
        VqError::Config(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqVaeConfig {
    pub in_channels: usize,
    /// Channel width after each stride-2 downsampling convolution.
    pub widths: Vec<usize>,
    pub latent_dim: usize,
    pub codebook_size: usize,
    /// Commitment weight.
    pub beta: f32,
    pub seed: u64,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        Self { in_channels: 3, widths: vec![16, 32], latent_dim: 16, codebook_size: 64, beta: 0.25, seed: 0 }
    }
}

impl VqVaeConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("in_channels", self.in_channels);
        kv.set("widths", self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","));
        kv.set("latent_dim", self.latent_dim);
        kv.set("codebook_size", self.codebook_size);
        kv.set("beta", self.beta);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, VqError> {
        let d = Self::default();
        Ok(Self {
            in_channels: kv.get_or("in_channels", d.in_channels)?,
            widths: kv.get_list("widths")?.unwrap_or(d.widths),
            latent_dim: kv.get_or("latent_dim", d.latent_dim)?,
            codebook_size: kv.get_or("codebook_size", d.codebook_size)?,
            beta: kv.get_or("beta", d.beta)?,
            seed: kv.get_or("seed", d.seed)?,
        })
    }
}

/// Codebook snapshot: `K×d` entries and per-entry assignment counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub entries: Tensor,
    pub usage_counts: Vec<u64>,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self, VqError> {
        if entries.rank() != 2 || entries.shape()[0] < 2 {
            return Err(VqError::ShapeMismatch(format!("codebook needs K>=2 rows, got {:?}", entries.shape())));
        }
        let k = entries.shape()[0];
        Ok(Self { entries, usage_counts: vec![0; k] })
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn quantize(&self, latents: &Tensor) -> Result<(Vec<usize>, Tensor), VqError> {
        quantize(latents, &self.entries)
    }
}

/// Index of the entry nearest to `z` in squared L2; the lowest index wins ties.
pub fn nearest_code(z: &[f32], entries: &[f32], d: usize) -> usize {
    let mut best = 0;
    let mut best_dist = f32::INFINITY;
    for (k, e) in entries.chunks_exact(d).enumerate() {
        let mut dist = 0f32;
        for (a, b) in z.iter().zip(e) {
            dist += (a - b) * (a - b);
        }
        if dist < best_dist {
            best_dist = dist;
            best = k;
        }
    }
    best
}

/// Snaps each `d`-vector along the last axis of `latents` to its nearest
/// codebook entry.
pub fn quantize(latents: &Tensor, codebook: &Tensor) -> Result<(Vec<usize>, Tensor), VqError> {
    let d = codebook.shape()[1];
    let found = *latents.shape().last().unwrap_or(&0);
    if found != d {
        return Err(VqError::DimensionMismatch { expected: d, found });
    }
    let mut indices = Vec::with_capacity(latents.numel() / d);
    let mut out = Vec::with_capacity(latents.numel());
    for z in latents.data().chunks_exact(d) {
        let k = nearest_code(z, codebook.data(), d);
        indices.push(k);
        out.extend_from_slice(&codebook.data()[k * d..(k + 1) * d]);
    }
    Ok((indices, Tensor::new(latents.shape(), out)?))
}

/// Per-frame residual `x - x̂` and its mean squared value.
#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub diff: Vec<f32>,
    pub energy: f64,
}

pub fn residual(video: &VideoClip, recon: &VideoClip) -> Result<Vec<Residual>, VqError> {
    if video.dims() != recon.dims() {
        return Err(VqError::ShapeMismatch(format!("{:?} vs {:?}", video.dims(), recon.dims())));
    }
    Ok((0..video.n)
        .map(|f| {
            let diff: Vec<f32> = video.frame(f).iter().zip(recon.frame(f)).map(|(a, b)| a - b).collect();
            let energy = diff.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / diff.len() as f64;
            Residual { diff, energy }
        })
        .collect())
}

/// Graph outputs of one training forward pass.
#[derive(Clone, Debug)]
pub struct VqForward {
    pub loss: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub z: Var,
    pub xhat: Var,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct VqVae {
    pub cfg: VqVaeConfig,
    pub store: ParamStore,
    enc: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec: Vec<ConvTranspose2d>,
    codebook: ParamId,
    pub usage_counts: Vec<u64>,
}

impl VqVae {
    pub fn new(cfg: VqVaeConfig) -> Result<Self, VqError> {
        if cfg.codebook_size < 2 || cfg.latent_dim == 0 || cfg.in_channels == 0 || cfg.widths.is_empty() {
            return Err(VqError::Config(format!("{cfg:?}")));
        }
        let mut rng = SplitMix64::derived(cfg.seed, 0x7651);
        let mut store = ParamStore::new();
        let mut enc = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &w) in cfg.widths.iter().enumerate() {
            enc.push(Conv2d::new(&mut store, &format!("vq.enc{i}"), cin, w, 4, 2, 1, &mut rng)?);
            cin = w;
        }
        let top = *cfg.widths.last().unwrap();
        let enc_out = Conv2d::new(&mut store, "vq.enc_out", top, cfg.latent_dim, 1, 1, 0, &mut rng)?;
        let codebook = store.add(
            "vq.codebook",
            Tensor::from_fn(&[cfg.codebook_size, cfg.latent_dim], |_| (rng.normal() * 0.1) as f32),
        )?;
        let dec_in = Conv2d::new(&mut store, "vq.dec_in", cfg.latent_dim, top, 1, 1, 0, &mut rng)?;
        let mut dec = Vec::new();
        let n = cfg.widths.len();
        for i in (0..n).rev() {
            let cout = if i == 0 { cfg.in_channels } else { cfg.widths[i - 1] };
            dec.push(ConvTranspose2d::new(&mut store, &format!("vq.dec{}", n - 1 - i), cfg.widths[i], cout, 4, 2, 1, &mut rng)?);
        }
        let usage_counts = vec![0; cfg.codebook_size];
        Ok(Self { cfg, store, enc, enc_out, dec_in, dec, codebook, usage_counts })
    }

    pub fn downsample(&self) -> usize {
        1 << self.cfg.widths.len()
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    pub fn codebook(&self) -> Codebook {
        Codebook { entries: self.store.get(self.codebook).clone(), usage_counts: self.usage_counts.clone() }
    }

    fn check_frame(&self, h: usize, w: usize) -> Result<(), VqError> {
        let f = self.downsample();
        if h % f != 0 || w % f != 0 {
            return Err(VqError::ShapeNotDivisible { h, w, factor: f });
        }
        Ok(())
    }

    /// `[B×C×H×W] -> [B×d×H/f×W/f]`
    pub fn encode(&self, s: &mut Session, x: Var) -> Result<Var, VqError> {
        let mut h = x;
        for c in &self.enc {
            h = c.forward(s, h)?;
            h = s.g.relu(h);
        }
        Ok(self.enc_out.forward(s, h)?)
    }

    /// `[B×d×h×w] -> [B×C×H×W]` with pixels in `(0,1)`.
    pub fn decode(&self, s: &mut Session, zq: Var) -> Result<Var, VqError> {
        let mut h = self.dec_in.forward(s, zq)?;
        h = s.g.relu(h);
        let last = self.dec.len() - 1;
        for (i, c) in self.dec.iter().enumerate() {
            h = c.forward(s, h)?;
            h = if i == last { s.g.sigmoid(h) } else { s.g.relu(h) };
        }
        Ok(h)
    }

    /// Reconstruction MSE + codebook loss + β·commitment loss, with the
    /// straight-through estimator around quantisation.
    pub fn forward_loss(&self, s: &mut Session, x: Var) -> Result<VqForward, VqError> {
        let shape = s.g.shape(x).to_vec();
        self.check_frame(shape[2], shape[3])?;
        let z = self.encode(s, x)?;
        let zs = s.g.shape(z).to_vec();
        let (b, h, w) = (zs[0], zs[2], zs[3]);
        let z_rows = s.g.nchw_to_rows(z)?;
        let d = self.cfg.latent_dim;
        let entries = self.store.get(self.codebook).data();
        let indices: Vec<usize> = s.g.value(z_rows).chunks_exact(d).map(|r| nearest_code(r, entries, d)).collect();
        let cb = s.p(self.codebook);
        let q_rows = s.g.gather_rows(cb, &indices)?;
        let z_stop = s.g.detach(z_rows);
        let q_stop = s.g.detach(q_rows);
        let codebook = s.g.mse(q_rows, z_stop)?;
        let commitment = s.g.mse(z_rows, q_stop)?;
        let st = s.g.straight_through(z_rows, q_rows)?;
        let zq = s.g.rows_to_nchw(st, b, h, w)?;
        let xhat = self.decode(s, zq)?;
        let recon = s.g.mse(xhat, x)?;
        let weighted = s.g.scale(commitment, self.cfg.beta);
        let l = s.g.add(recon, codebook)?;
        let loss = s.g.add(l, weighted)?;
        Ok(VqForward { loss, recon, codebook, commitment, z, xhat, indices })
    }

    /// Codebook indices for a `[B×C×H×W]` batch, with the latent grid size.
    pub fn encode_indices(&self, frames: &Tensor) -> Result<(Vec<usize>, usize, usize), VqError> {
        let s0 = frames.shape();
        if s0.len() != 4 || s0[1] != self.cfg.in_channels {
            return Err(VqError::ShapeMismatch(format!("frames {s0:?}")));
        }
        self.check_frame(s0[2], s0[3])?;
        let mut s = Session::new(&self.store);
        let x = s.g.constant(frames);
        let z = self.encode(&mut s, x)?;
        let zs = s.g.shape(z).to_vec();
        let rows = s.g.nchw_to_rows(z)?;
        let d = self.cfg.latent_dim;
        let entries = self.store.get(self.codebook).data();
        let idx = s.g.value(rows).chunks_exact(d).map(|r| nearest_code(r, entries, d)).collect();
        Ok((idx, zs[2], zs[3]))
    }

    /// Decodes a grid of codebook indices into `[B×C×H×W]` frames.
    pub fn decode_indices(&self, indices: &[usize], b: usize, h: usize, w: usize) -> Result<Tensor, VqError> {
        if indices.len() != b * h * w || indices.iter().any(|&k| k >= self.cfg.codebook_size) {
            return Err(VqError::ShapeMismatch(format!("{} indices for grid {b}x{h}x{w}", indices.len())));
        }
        let mut s = Session::new(&self.store);
        let cb = s.g.constant(self.store.get(self.codebook));
        let q = s.g.gather_rows(cb, indices)?;
        let zq = s.g.rows_to_nchw(q, b, h, w)?;
        let out = self.decode(&mut s, zq)?;
        let mut t = s.g.tensor(out);
        t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(t)
    }

    /// Encode, quantise and decode every frame in one pass.
    pub fn reconstruct(&self, clip: &VideoClip) -> Result<VideoClip, VqError> {
        self.reconstruct_jittered(clip, 0.0, &mut SplitMix64::new(0))
    }

    /// Like [`VqVae::reconstruct`], but each latent cell's index is replaced
    /// by a uniformly random one with probability `jitter`, independently per
    /// frame.
    pub fn reconstruct_jittered(&self, clip: &VideoClip, jitter: f64, rng: &mut SplitMix64) -> Result<VideoClip, VqError> {
        if !(0.0..=1.0).contains(&jitter) {
            return Err(VqError::Config(format!("jitter {jitter} outside [0,1]")));
        }
        let x = clip.to_nchw(0, clip.n);
        let (mut idx, h, w) = self.encode_indices(&x)?;
        if jitter > 0.0 {
            jitter_indices(&mut idx, jitter, self.cfg.codebook_size, rng);
        }
        let out = self.decode_indices(&idx, clip.n, h, w)?;
        Ok(VideoClip::from_nchw(clip.id.clone(), clip.label, clip.fps, &out)?)
    }

    /// Mean squared reconstruction error of a clip.
    pub fn reconstruction_mse(&self, clip: &VideoClip) -> Result<f64, VqError> {
        let r = self.reconstruct(clip)?;
        let res = residual(clip, &r)?;
        Ok(res.iter().map(|r| r.energy).sum::<f64>() / res.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store);
        ck.set_text("kind", "vqvae");
        ck.set_text("config", &self.cfg.to_kv().to_text());
        let usage: Vec<String> = self.usage_counts.iter().map(u64::to_string).collect();
        ck.set_text("usage", &usage.join(","));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, VqError> {
        if ck.text("kind").as_deref() != Some("vqvae") {
            return Err(VqError::Config("checkpoint does not hold a VQ-VAE".into()));
        }
        let text = ck.text("config").ok_or_else(|| CheckpointError::MissingTensor("meta.config".into()))?;
        let cfg = VqVaeConfig::from_kv(&KvMap::parse(&text)?)?;
        let mut m = Self::new(cfg)?;
        ck.apply_to(&mut m.store)?;
        if let Some(text) = ck.text("usage").filter(|t| !t.is_empty()) {
            let counts: Result<Vec<u64>, _> = text.split(',').map(str::parse).collect();
            match counts {
                Ok(c) if c.len() == m.cfg.codebook_size => m.usage_counts = c,
                _ => return Err(VqError::Config("malformed codebook usage counts".into())),
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), VqError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, VqError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub fn jitter_indices(idx: &mut [usize], jitter: f64, k: usize, rng: &mut SplitMix64) {
    for v in idx.iter_mut() {
        if rng.next_f64() < jitter {
            *v = rng.below(k);
        }
    }
}

/// Flat pool of `C×H×W` frames for autoencoder training.
#[derive(Clone, Debug)]
pub struct FramePool {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f32>,
}

impl FramePool {
    pub fn from_clips<'a>(clips: impl IntoIterator<Item = &'a VideoClip>) -> Self {
        let mut pool = Self { c: 0, h: 0, w: 0, data: Vec::new() };
        for clip in clips {
            if pool.data.is_empty() {
                (pool.c, pool.h, pool.w) = (clip.c, clip.h, clip.w);
            }
            assert_eq!((clip.c, clip.h, clip.w), (pool.c, pool.h, pool.w), "frame sizes differ");
            pool.data.extend_from_slice(clip.to_nchw(0, clip.n).data());
        }
        pool
    }

    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn len(&self) -> usize {
        if self.data.is_empty() {
            0
        } else {
            self.data.len() / self.frame_len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let fl = self.frame_len();
        let mut out = Vec::with_capacity(idx.len() * fl);
        for &i in idx {
            out.extend_from_slice(&self.data[i * fl..(i + 1) * fl]);
        }
        Tensor::new(&[idx.len(), self.c, self.h, self.w], out).expect("pool frames are non-empty")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Unused codes are re-seeded from encoder outputs this often; 0 disables.
    pub restart_every: usize,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self { steps: 1200, batch: 16, lr: 2e-3, seed: 0, restart_every: 100 }
    }
}

/// Trained model plus the per-step training loss.
pub struct VqTrainResult {
    pub model: VqVae,
    pub losses: Vec<f32>,
}

pub fn train_vqvae(pool: &FramePool, cfg: VqVaeConfig, tc: &VqTrainConfig) -> Result<VqTrainResult, VqError> {
    if pool.is_empty() {
        return Err(VqError::EmptyCorpus);
    }
    let mut model = VqVae::new(cfg)?;
    model.check_frame(pool.h, pool.w)?;
    let mut rng = SplitMix64::derived(tc.seed, 0x7652);
    let mut adam = Adam::new(&model.store, AdamConfig { lr: tc.lr, ..Default::default() });
    let (k, d) = (model.cfg.codebook_size, model.cfg.latent_dim);
    let mut window = vec![0u64; k];
    let mut losses = Vec::with_capacity(tc.steps);
    let batch = tc.batch.max(1);
    let restart_until = tc.steps * 4 / 5;

    for step in 0..tc.steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.below(pool.len())).collect();
        let x_t = pool.batch(&idx);
        if step == 0 {
            init_codebook(&mut model, &x_t, &mut rng)?;
        }
        let mut grads = GradBuffer::zeros_like(&model.store);
        let (loss, indices, z_rows) = {
            let mut s = Session::new(&model.store);
            let x = s.g.constant(&x_t);
            let f = model.forward_loss(&mut s, x)?;
            let loss = s.g.value(f.loss)[0];
            if !loss.is_finite() {
                return Err(VqError::NonFiniteLoss { step });
            }
            s.backward_into(f.loss, &mut grads)?;
            let rows = s.g.nchw_to_rows(f.z)?;
            (loss, f.indices, s.g.value(rows).to_vec())
        };
        losses.push(loss);
        for &i in &indices {
            window[i] += 1;
        }
        adam.step(&mut model.store, &grads)?;

        if tc.restart_every > 0 && (step + 1) % tc.restart_every == 0 && step < restart_until {
            let n_rows = z_rows.len() / d;
            let cb = model.store.get_mut(model.codebook).data_mut();
            let mut dead = 0;
            for (code, count) in window.iter_mut().enumerate() {
                if *count == 0 {
                    let r = rng.below(n_rows);
                    cb[code * d..(code + 1) * d].copy_from_slice(&z_rows[r * d..(r + 1) * d]);
                    dead += 1;
                }
                *count = 0;
            }
            debug!("vqvae step {} loss {loss:.5} restarted {dead} codes", step + 1);
        }
    }
    refresh_usage(&mut model, pool)?;
    Ok(VqTrainResult { model, losses })
}

/// Seeds the codebook with encoder outputs of the first batch.
fn init_codebook(model: &mut VqVae, x: &Tensor, rng: &mut SplitMix64) -> Result<(), VqError> {
    let rows = {
        let mut s = Session::new(&model.store);
        let xv = s.g.constant(x);
        let z = model.encode(&mut s, xv)?;
        let r = s.g.nchw_to_rows(z)?;
        s.g.value(r).to_vec()
    };
    let d = model.cfg.latent_dim;
    let n = rows.len() / d;
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let cb = model.store.get_mut(model.codebook).data_mut();
    for code in 0..model.cfg.codebook_size {
        let r = order[code % n];
        cb[code * d..(code + 1) * d].copy_from_slice(&rows[r * d..(r + 1) * d]);
    }
    Ok(())
}

/// Recounts code assignments over every frame of `pool`.
pub fn refresh_usage(model: &mut VqVae, pool: &FramePool) -> Result<(), VqError> {
    let mut counts = vec![0u64; model.cfg.codebook_size];
    let all: Vec<usize> = (0..pool.len()).collect();
    for chunk in all.chunks(64) {
        let (idx, _, _) = model.encode_indices(&pool.batch(chunk))?;
        for i in idx {
            counts[i] += 1;
        }
    }
    model.usage_counts = counts;
    Ok(())
}
