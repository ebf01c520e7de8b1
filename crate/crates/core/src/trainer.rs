//! End-to-end training of the detector with the VQ-VAE and feature
//! providers frozen.

use std::fmt::Write as _;

use log::{debug, info};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::corpus::{CorpusError, Label, VideoClip};
use crate::dataset::PreparedVideo;
use crate::detector::{ClipInput, Detector, ModelError};
use crate::eval::{score_videos, EvalError};
use crate::kv::{KvError, KvMap};
use crate::mmfr::FeatureProvider;
use crate::numerics::{Adam, AdamConfig, GradBuffer, NumericsError, Session, SplitMix64};
use crate::parallel::par_map;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus needs both classes; got {fakes} fake and {reals} real videos")]
    SingleClassCorpus { fakes: usize, reals: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("video {id} has {len} frames, clip length is {clip_len}")]
    VideoTooShort { id: String, len: usize, clip_len: usize },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl From<KvError> for TrainError {
    fn from(e: KvError) -> Self {
        TrainError::Config(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub clip_len: usize,
    pub crop: usize,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Steps between validation passes; 0 means once per epoch over the
    /// training videos.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, clip_len: 10, crop: 32, batch: 4, steps: 500, seed: 0, eval_every: 0 }
    }
}

pub const TRAIN_KEYS: [&str; 7] = ["lr", "clip_len", "crop", "batch", "steps", "seed", "eval_every"];

impl TrainConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("lr", self.lr);
        kv.set("clip_len", self.clip_len);
        kv.set("crop", self.crop);
        kv.set("batch", self.batch);
        kv.set("steps", self.steps);
        kv.set("seed", self.seed);
        kv.set("eval_every", self.eval_every);
        kv
    }

    /// Training keys of `kv`; `seed` is required.
    pub fn from_kv(kv: &KvMap) -> Result<Self, TrainError> {
        let d = Self::default();
        let cfg = Self {
            lr: kv.get_or("lr", d.lr)?,
            clip_len: kv.get_or("clip_len", d.clip_len)?,
            crop: kv.get_or("crop", d.crop)?,
            batch: kv.get_or("batch", d.batch)?,
            steps: kv.get_or("steps", d.steps)?,
            seed: kv.require("seed")?,
            eval_every: kv.get_or("eval_every", d.eval_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.clip_len == 0 || self.batch == 0 || self.crop == 0 {
            return Err(TrainError::Config("clip_len, batch and crop must be positive".into()));
        }
        Ok(())
    }
}

/// `-(y·log σ(s) + (1−y)·log(1−σ(s)))` in the form
/// `max(s,0) − s·y + log(1 + e^{−|s|})`.
pub fn bce_loss(s: f64, y: f64) -> f64 {
    s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()
}

/// Uniformly placed contiguous window of `clip_len` frames, center-cropped
/// to `crop`.
pub fn sample_clip(video: &VideoClip, clip_len: usize, crop: usize, rng: &mut SplitMix64) -> Result<VideoClip, TrainError> {
    let start = sample_start(video.n, clip_len, rng).ok_or_else(|| TrainError::VideoTooShort {
        id: video.id.clone(),
        len: video.n,
        clip_len,
    })?;
    Ok(video.window(start, clip_len)?.center_crop(crop)?)
}

/// Uniform start index in `0..=n-clip_len`, or `None` when too short.
pub fn sample_start(n: usize, clip_len: usize, rng: &mut SplitMix64) -> Option<usize> {
    if clip_len == 0 || n < clip_len {
        return None;
    }
    Some(rng.below(n - clip_len + 1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f32,
    pub val_auc: Option<f64>,
}

/// `step,loss,val_auc` with an empty AUC cell on steps without validation.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,loss,val_auc\n");
    for r in rows {
        let auc = r.val_auc.map(|a| format!("{a:.6}")).unwrap_or_default();
        let _ = writeln!(out, "{},{:.6},{auc}", r.step, r.loss);
    }
    out
}

fn class_counts(videos: &[PreparedVideo]) -> (usize, usize) {
    let fakes = videos.iter().filter(|v| v.label() == Label::Fake).count();
    (fakes, videos.len() - fakes)
}

struct Best {
    auc: f64,
    step: usize,
    params: Checkpoint,
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: Detector,
    adam: Adam,
    rng: SplitMix64,
    step: usize,
    train: &'a [PreparedVideo],
    val: &'a [PreparedVideo],
    provider: &'a dyn FeatureProvider,
    best: Option<Best>,
    pub metrics: Vec<MetricRow>,
}

pub struct TrainOutcome {
    /// Parameters at the best validation AUC, or the final ones when no
    /// validation set was given.
    pub best: Detector,
    pub best_auc: Option<f64>,
    pub best_step: usize,
    pub last: Detector,
    pub metrics: Vec<MetricRow>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        model: Detector,
        train: &'a [PreparedVideo],
        val: &'a [PreparedVideo],
        provider: &'a dyn FeatureProvider,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let (fakes, reals) = class_counts(train);
        if fakes == 0 || reals == 0 {
            return Err(TrainError::SingleClassCorpus { fakes, reals });
        }
        if let Some(v) = train.iter().chain(val).find(|v| v.len() < cfg.clip_len) {
            return Err(TrainError::VideoTooShort { id: v.id().to_string(), len: v.len(), clip_len: cfg.clip_len });
        }
        if cfg.clip_len > model.cfg.iafa.n_max {
            return Err(TrainError::Config(format!("clip_len {} exceeds n_max {}", cfg.clip_len, model.cfg.iafa.n_max)));
        }
        let adam = Adam::new(&model.store, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
        let rng = SplitMix64::derived(cfg.seed, 0x7A41_2000);
        Ok(Self { cfg, model, adam, rng, step: 0, train, val, provider, best: None, metrics: Vec::new() })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    fn eval_every(&self) -> usize {
        match self.cfg.eval_every {
            0 => self.train.len().div_ceil(self.cfg.batch).max(1),
            n => n,
        }
    }

    /// One optimizer step over a sampled batch; returns the mean loss.
    pub fn step_once(&mut self) -> Result<f32, TrainError> {
        let picks: Vec<(usize, usize)> = (0..self.cfg.batch)
            .map(|_| {
                let v = self.rng.below(self.train.len());
                let start = sample_start(self.train[v].len(), self.cfg.clip_len, &mut self.rng).expect("checked length");
                (v, start)
            })
            .collect();
        let scale = 1.0 / self.cfg.batch as f32;
        let model = &self.model;
        let (train, provider, len) = (self.train, self.provider, self.cfg.clip_len);
        let results = par_map(&picks, |&(v, start)| -> Result<(f32, GradBuffer), TrainError> {
            let video = &train[v];
            let (x, xhat) = video.window(start, len)?;
            let rec = video.record(model, provider, start, len).map_err(ModelError::from)?;
            let mut s = Session::new(&model.store);
            let logit = model.forward(&mut s, &ClipInput { frames: &x, recon: &xhat, record: rec.as_deref() })?;
            let loss = s.g.bce_with_logits(logit, video.label().target())?;
            let value = s.g.value(loss)[0];
            let scaled = s.g.scale(loss, scale);
            let mut grads = GradBuffer::zeros_like(&model.store);
            s.backward_into(scaled, &mut grads)?;
            Ok((value, grads))
        });
        let step = self.step + 1;
        let mut acc = GradBuffer::zeros_like(&self.model.store);
        let mut loss = 0.0f32;
        for r in results {
            let (l, g) = r?;
            if !l.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            loss += l * scale;
            acc.add(&g);
        }
        self.adam.step(&mut self.model.store, &acc).map_err(|e| match e {
            NumericsError::NonFiniteGradient(_) => TrainError::NonFiniteLoss { step },
            e => e.into(),
        })?;
        self.step = step;
        Ok(loss)
    }

    /// Validation AUC of the current parameters (windows from offset 0).
    pub fn validate(&self) -> Result<f64, TrainError> {
        let table = score_videos(self.val, &self.model, self.provider, self.cfg.clip_len, self.cfg.clip_len, 0, "val")?;
        Ok(table.auc()?)
    }

    fn can_validate(&self) -> bool {
        let (f, r) = class_counts(self.val);
        f > 0 && r > 0
    }

    /// Trains until `until` steps have been taken in total.
    pub fn run_until(&mut self, until: usize) -> Result<(), TrainError> {
        let every = self.eval_every();
        while self.step < until.min(self.cfg.steps) {
            let loss = self.step_once()?;
            let mut row = MetricRow { step: self.step, loss, val_auc: None };
            if (self.step % every == 0 || self.step == self.cfg.steps) && self.can_validate() {
                let a = self.validate()?;
                row.val_auc = Some(a);
                info!("step {} loss {loss:.4} val_auc {a:.4}", self.step);
                if self.best.as_ref().is_none_or(|b| a > b.auc) {
                    self.best = Some(Best { auc: a, step: self.step, params: Checkpoint::from_store(&self.model.store) });
                }
            } else {
                debug!("step {} loss {loss:.4}", self.step);
            }
            self.metrics.push(row);
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<TrainOutcome, TrainError> {
        self.run_until(self.cfg.steps)?;
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome {
        let last = self.model;
        let (best, best_auc, best_step) = match self.best {
            Some(b) => {
                let mut m = last.clone();
                b.params.apply_to(&mut m.store).expect("snapshot of the same store");
                (m, Some(b.auc), b.step)
            }
            None => (last.clone(), None, self.step),
        };
        TrainOutcome { best, best_auc, best_step, last, metrics: self.metrics }
    }

    /// Everything needed to continue this run bit-identically.
    pub fn state_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.set_adam(&self.model.store, &self.adam);
        ck.set_text("train_config", &self.cfg.to_kv().to_text());
        ck.set_u64("step", self.step as u64);
        ck.set_u64("rng_state", self.rng.state());
        if let Some(b) = &self.best {
            ck.set_text("best_auc", &format!("{:e}", b.auc));
            ck.set_u64("best_step", b.step as u64);
            for (name, t) in &b.params.tensors {
                ck.insert(format!("best.{name}"), t.clone());
            }
        }
        ck
    }

    /// Continues a run from [`Trainer::state_checkpoint`].
    pub fn resume(
        ck: &Checkpoint,
        train: &'a [PreparedVideo],
        val: &'a [PreparedVideo],
        provider: &'a dyn FeatureProvider,
    ) -> Result<Self, TrainError> {
        let missing = |k: &str| CheckpointError::MissingTensor(format!("meta.{k}"));
        let cfg = TrainConfig::from_kv(&KvMap::parse(&ck.text("train_config").ok_or_else(|| missing("train_config"))?)?)?;
        let model = Detector::from_checkpoint(ck)?;
        let mut t = Self::new(cfg, model, train, val, provider)?;
        ck.restore_adam(&t.model.store, &mut t.adam)?;
        t.step = ck.u64("step").ok_or_else(|| missing("step"))? as usize;
        t.rng = SplitMix64::new(ck.u64("rng_state").ok_or_else(|| missing("rng_state"))?);
        if let Some(a) = ck.text("best_auc") {
            let auc = a.parse().map_err(|_| CheckpointError::InvalidEntry("meta.best_auc".into()))?;
            let mut params = Checkpoint::new();
            for (name, tensor) in &ck.tensors {
                if let Some(n) = name.strip_prefix("best.") {
                    params.insert(n, tensor.clone());
                }
            }
            let step = ck.u64("best_step").ok_or_else(|| missing("best_step"))? as usize;
            t.best = Some(Best { auc, step, params });
        }
        Ok(t)
    }
}
