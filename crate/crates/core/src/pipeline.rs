//! End-to-end workflows shared by the command line and the benchmark:
//! corpus on disk, fake generation, training, evaluation and ablations.

use std::path::{Path, PathBuf};

use log::info;
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::corpus::{
    gen_fake, gen_real, perturb, write_clip, CorpusError, Label, Manifest, ManifestEntry, Perturbation, RealConfig,
    Split, VideoClip, DEFAULT_MSE_BOUND,
};
use crate::dataset::{prepare, PreparedVideo};
use crate::detector::{Detector, DetectorConfig, ModelError, Variant};
use crate::eval::{score_videos, EvalError, ScoreTable, SeedReport, SeedResult};
use crate::mmfr::{FeatureProvider, MmfrError};
use crate::trainer::{TrainConfig, TrainError, TrainOutcome, Trainer};
use crate::vqvae::{train_vqvae, FramePool, VqError, VqTrainConfig, VqVae, VqVaeConfig};

pub const CLIP_EXT: &str = "mmdv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Mmfr(#[from] MmfrError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Invalid(String),
}

/// Writes clips as `dir/<id>.mmdv` and returns a manifest rooted at `dir`
/// with relative paths.
pub fn write_clips(dir: &Path, clips: &[VideoClip], splits: &[Split], generator: &str) -> Result<Manifest, CorpusError> {
    std::fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    let mut m = Manifest::new(dir);
    for (clip, &split) in clips.iter().zip(splits) {
        let name = PathBuf::from(format!("{}.{CLIP_EXT}", clip.id));
        write_clip(&dir.join(&name), clip)?;
        m.entries.push(ManifestEntry { path: name, label: clip.label, split, generator: generator.to_string() });
    }
    Ok(m)
}

/// Generates `count` real clips under `dir` with a manifest.
pub fn gen_corpus(dir: &Path, seed: u64, count: usize, cfg: &RealConfig) -> Result<Manifest, CorpusError> {
    let clips = gen_real(seed, count, cfg);
    let splits = Split::assign(count, seed);
    let m = write_clips(dir, &clips, &splits, "synthetic")?;
    m.save(&dir.join(crate::corpus::MANIFEST_FILE))?;
    info!("wrote {count} real clips to {}", dir.display());
    Ok(m)
}

/// Loads every clip of `split` (all splits when `None`).
pub fn load_clips(m: &Manifest, split: Option<Split>) -> Result<Vec<(VideoClip, Split)>, CorpusError> {
    m.entries.iter().filter(|e| split.is_none_or(|s| e.split == s)).map(|e| Ok((m.load_clip(e)?, e.split))).collect()
}

/// Trains the VQ-VAE on the real frames of the training split.
pub fn train_vqvae_on(reals: &[&VideoClip], cfg: VqVaeConfig, tc: &VqTrainConfig) -> Result<(VqVae, Vec<f32>), VqError> {
    let pool = FramePool::from_clips(reals.iter().copied());
    info!("training VQ-VAE on {} frames for {} steps", pool.len(), tc.steps);
    let r = train_vqvae(&pool, cfg, tc)?;
    Ok((r.model, r.losses))
}

/// Writes one fake per real clip of `m` into `out`, plus a manifest there
/// listing the reals (by absolute path) and the fakes, in matching splits.
pub fn gen_fakes_to_dir(m: &Manifest, vq: &VqVae, jitter: f64, seed: u64, out: &Path) -> Result<Manifest, PipelineError> {
    let reals: Vec<(&ManifestEntry, VideoClip)> = m
        .entries
        .iter()
        .filter(|e| e.label == Label::Real)
        .map(|e| Ok((e, m.load_clip(e)?)))
        .collect::<Result<_, CorpusError>>()?;
    let clips: Vec<VideoClip> = reals.iter().map(|(_, c)| c.clone()).collect();
    let fakes = gen_fake(&clips, vq, jitter, seed, DEFAULT_MSE_BOUND)?;
    let splits: Vec<Split> = reals.iter().map(|(e, _)| e.split).collect();
    let mut fm = write_clips(out, &fakes, &splits, &format!("vqvae-jitter-{jitter}"))?;
    let mut entries = Vec::with_capacity(2 * reals.len());
    for (e, _) in &reals {
        let abs = std::path::absolute(m.resolve(e)).map_err(|err| CorpusError::io(&m.resolve(e), err))?;
        entries.push(ManifestEntry { path: abs, ..(*e).clone() });
    }
    entries.append(&mut fm.entries);
    fm.entries = entries;
    fm.save(&out.join(crate::corpus::MANIFEST_FILE))?;
    Ok(fm)
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub seed: u64,
    pub reals: usize,
    pub real: RealConfig,
    pub jitter: f64,
    pub vq: VqVaeConfig,
    pub vq_train: VqTrainConfig,
    pub crop: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            reals: 200,
            real: RealConfig::default(),
            jitter: 0.2,
            vq: VqVaeConfig::default(),
            vq_train: VqTrainConfig::default(),
            crop: 32,
        }
    }
}

/// In-memory toy benchmark: real and fake videos with reconstructions,
/// split into train, validation and test.
pub struct Bench {
    pub vq: VqVae,
    pub vq_losses: Vec<f32>,
    pub train: Vec<PreparedVideo>,
    pub val: Vec<PreparedVideo>,
    pub test: Vec<PreparedVideo>,
}

fn by_split(prepared: Vec<PreparedVideo>, splits: &[Split]) -> [Vec<PreparedVideo>; 3] {
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (p, s) in prepared.into_iter().zip(splits) {
        let k = match s {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        out[k].push(p);
    }
    out
}

/// Prepares a labelled clip set with the frozen VQ-VAE.
pub fn prepare_splits(
    clips: &[(VideoClip, Split)],
    vq: &VqVae,
    crop: usize,
) -> Result<[Vec<PreparedVideo>; 3], PipelineError> {
    let videos: Vec<VideoClip> = clips.iter().map(|(c, _)| c.clone()).collect();
    let splits: Vec<Split> = clips.iter().map(|(_, s)| *s).collect();
    Ok(by_split(prepare(&videos, vq, crop)?, &splits))
}

impl Bench {
    pub fn build(cfg: &BenchConfig) -> Result<Self, PipelineError> {
        let reals = gen_real(cfg.seed, cfg.reals, &cfg.real);
        let splits = Split::assign(cfg.reals, cfg.seed);
        let train_reals: Vec<&VideoClip> =
            reals.iter().zip(&splits).filter(|(_, s)| **s == Split::Train).map(|(c, _)| c).collect();
        let (vq, vq_losses) = train_vqvae_on(&train_reals, cfg.vq.clone(), &cfg.vq_train)?;
        let fakes = gen_fake(&reals, &vq, cfg.jitter, cfg.seed, DEFAULT_MSE_BOUND)?;
        let mut clips: Vec<(VideoClip, Split)> = reals.into_iter().zip(splits.iter().copied()).collect();
        clips.extend(fakes.into_iter().zip(splits.iter().copied()));
        let [train, val, test] = prepare_splits(&clips, &vq, cfg.crop)?;
        info!("bench: {} train, {} val, {} test videos", train.len(), val.len(), test.len());
        Ok(Self { vq, vq_losses, train, val, test })
    }

    /// Applies a perturbation to every test video and re-runs the frozen
    /// VQ-VAE on the result.
    pub fn perturbed_test(&self, p: &Perturbation) -> Result<Vec<PreparedVideo>, PipelineError> {
        let videos: Vec<VideoClip> = self.test.iter().map(|v| perturb(&v.video, p)).collect::<Result<_, _>>()?;
        Ok(prepare(&videos, &self.vq, videos.first().map_or(1, |v| v.h.min(v.w)))?)
    }
}

/// Trains one detector configuration.
pub fn train_detector(
    model_cfg: DetectorConfig,
    train_cfg: TrainConfig,
    train: &[PreparedVideo],
    val: &[PreparedVideo],
    provider: &dyn FeatureProvider,
) -> Result<TrainOutcome, PipelineError> {
    let model = Detector::new(model_cfg)?;
    Ok(Trainer::new(train_cfg, model, train, val, provider)?.run()?)
}

/// Video-level AUC on `videos` with non-overlapping windows from offset 0.
pub fn test_auc(
    model: &Detector,
    videos: &[PreparedVideo],
    provider: &dyn FeatureProvider,
    clip_len: usize,
    tag: &str,
) -> Result<(f64, ScoreTable), PipelineError> {
    let t = score_videos(videos, model, provider, clip_len, clip_len, 0, tag)?;
    Ok((t.auc()?, t))
}

/// Trains and tests `variant` once per seed; the seed drives both model
/// initialisation and clip sampling. Rows are tagged with the variant name.
pub fn ablation_run(
    variant: Variant,
    base_model: &DetectorConfig,
    base_train: &TrainConfig,
    bench: &Bench,
    provider: &dyn FeatureProvider,
    seeds: &[u64],
) -> Result<SeedReport, PipelineError> {
    variant.validate()?;
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mc = DetectorConfig { variant, seed, ..base_model.clone() };
        let tc = TrainConfig { seed, ..base_train.clone() };
        let out = train_detector(mc, tc.clone(), &bench.train, &bench.val, provider)?;
        let (auc, _) = test_auc(&out.best, &bench.test, provider, tc.clip_len, &variant.row_name())?;
        info!("ablation {variant} seed {seed}: auc {auc:.4}");
        results.push(SeedResult { tag: variant.row_name(), seed, auc });
    }
    Ok(SeedReport::from_results(results))
}
