use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use mmdet_core::checkpoint::Checkpoint;
use mmdet_core::corpus::{perturb as perturb_clip, Label, Manifest, ManifestEntry, Perturbation, RealConfig, Split};
use mmdet_core::dataset::PreparedVideo;
use mmdet_core::detector::{Detector, DetectorConfig, Variant};
use mmdet_core::eval::{layer_probe, multi_seed_report, parse_features_csv, score_videos, KMeansConfig, SeedReport};
use mmdet_core::kv::KvMap;
use mmdet_core::mmfr::{
    cache_times, frame_key, load_features, write_features, FeatureProvider, MockConfig, MockProvider, MmfrRecord,
};
use mmdet_core::pipeline::{
    ablation_run, gen_corpus as write_corpus, gen_fakes_to_dir, load_clips, prepare_splits, train_detector,
    train_vqvae_on, write_clips,
};
use mmdet_core::trainer::{metrics_csv, TrainConfig};
use mmdet_core::vqvae::{VqTrainConfig, VqVae, VqVaeConfig};

use crate::config::{get, path, require_seed, UsageError};

/// Runs `f`; when it fails, removes `out` unless it existed beforehand.
pub fn guarded(out: &Path, f: impl FnOnce() -> Result<()>) -> Result<()> {
    let existed = out.exists();
    let r = f();
    if r.is_err() && !existed && out.exists() {
        let _ = if out.is_dir() { std::fs::remove_dir_all(out) } else { std::fs::remove_file(out) };
    }
    r
}

fn log_config(command: &str, kv: &KvMap) {
    info!("{command} resolved config:\n{}", kv.to_text().trim_end());
}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn load_manifest(kv: &KvMap, key: &str) -> Result<Manifest> {
    let p = path(kv, key)?;
    Manifest::load_dir_or_file(&p).with_context(|| format!("loading manifest {}", p.display()))
}

fn load_vq(kv: &KvMap) -> Result<VqVae> {
    let p = path(kv, "vqvae")?;
    VqVae::load(&p).with_context(|| format!("loading VQ-VAE {}", p.display()))
}

fn provider(kv: &KvMap) -> Result<Box<dyn FeatureProvider>> {
    match kv.get_str("provider").unwrap_or("mock") {
        "mock" => {
            let cfg = MockConfig {
                seed: get(kv, "provider_seed", 0u64)?,
                sigma: get(kv, "sigma", 1.0f32)?,
                interval_s: get(kv, "interval", MockConfig::default().interval_s)?,
            };
            Ok(Box::new(MockProvider::new(cfg)))
        }
        "file" => {
            let p = path(kv, "features")?;
            Ok(Box::new(load_features(&p).with_context(|| format!("loading features {}", p.display()))?))
        }
        other => Err(usage(format!("provider must be mock or file, got {other:?}"))),
    }
}

pub fn gen_corpus(kv: &KvMap, out: &Path) -> Result<()> {
    let seed = require_seed(kv)?;
    log_config("gen-corpus", kv);
    let size = get(kv, "size", 32usize)?;
    let cfg = RealConfig {
        frames: get(kv, "frames", 16usize)?,
        height: size,
        width: size,
        fps: get(kv, "fps", 8.0f32)?,
        grain: get(kv, "grain", 0.01f64)?,
    };
    write_corpus(out, seed, get(kv, "count", 200usize)?, &cfg)?;
    Ok(())
}

pub fn train_vqvae(kv: &KvMap, out: &Path) -> Result<()> {
    let seed = require_seed(kv)?;
    log_config("train-vqvae", kv);
    let m = load_manifest(kv, "corpus")?;
    let reals: Vec<_> = load_clips(&m, Some(Split::Train))?.into_iter().filter(|(c, _)| c.label == Label::Real).map(|(c, _)| c).collect();
    if reals.is_empty() {
        bail!("corpus has no real training clips");
    }
    let d = VqVaeConfig::default();
    let cfg = VqVaeConfig {
        codebook_size: get(kv, "codebook_size", d.codebook_size)?,
        latent_dim: get(kv, "latent_dim", d.latent_dim)?,
        beta: get(kv, "beta", d.beta)?,
        seed,
        ..d
    };
    let t = VqTrainConfig::default();
    let tc = VqTrainConfig {
        steps: get(kv, "vq_steps", t.steps)?,
        batch: get(kv, "vq_batch", t.batch)?,
        lr: get(kv, "vq_lr", t.lr)?,
        seed,
        ..t
    };
    let refs: Vec<_> = reals.iter().collect();
    let (vq, losses) = train_vqvae_on(&refs, cfg, &tc)?;
    let used = vq.usage_counts.iter().filter(|&&c| c > 0).count();
    info!("final loss {:.5}, {used}/{} codes used", losses.last().copied().unwrap_or(f32::NAN), vq.cfg.codebook_size);
    vq.save(out)?;
    Ok(())
}

pub fn gen_fakes(kv: &KvMap, out: &Path) -> Result<()> {
    let seed = require_seed(kv)?;
    log_config("gen-fakes", kv);
    let m = load_manifest(kv, "corpus")?;
    let vq = load_vq(kv)?;
    let fm = gen_fakes_to_dir(&m, &vq, get(kv, "jitter", 0.2f64)?, seed, out)?;
    info!("wrote {} fakes to {}", fm.entries.iter().filter(|e| e.label == Label::Fake).count(), out.display());
    Ok(())
}

fn detector_config(kv: &KvMap, seed: u64) -> Result<DetectorConfig> {
    let mut cfg = DetectorConfig::from_kv(kv).map_err(usage)?;
    if kv.get_str("model_seed").is_none() {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn train_config(kv: &KvMap) -> Result<TrainConfig> {
    require_seed(kv)?;
    TrainConfig::from_kv(kv).map_err(usage)
}

/// Loads the manifest and reconstructs every clip with the frozen VQ-VAE.
fn prepared_splits(kv: &KvMap, crop: usize) -> Result<[Vec<PreparedVideo>; 3]> {
    let m = load_manifest(kv, "manifest")?;
    let vq = load_vq(kv)?;
    Ok(prepare_splits(&load_clips(&m, None)?, &vq, crop)?)
}

pub fn train(kv: &KvMap, out: &Path, metrics: Option<&Path>) -> Result<()> {
    let tc = train_config(kv)?;
    let mc = detector_config(kv, tc.seed)?;
    log_config("train", kv);
    let p = provider(kv)?;
    let [train, val, _] = prepared_splits(kv, tc.crop)?;
    info!("training {} on {} videos ({} validation)", mc.variant, train.len(), val.len());
    let outcome = train_detector(mc, tc, &train, &val, p.as_ref())?;
    if let Some(a) = outcome.best_auc {
        info!("best validation AUC {a:.4} at step {}", outcome.best_step);
    }
    let mut stored = kv.clone();
    for k in ["manifest", "vqvae", "features"] {
        if let Some(p) = kv.get_str(k) {
            stored.set(k, std::path::absolute(p)?.display());
        }
    }
    let mut ck = outcome.best.to_checkpoint();
    ck.set_text("run_config", &stored.to_text());
    ck.save(out)?;
    if let Some(mp) = metrics {
        guarded(mp, || Ok(std::fs::write(mp, metrics_csv(&outcome.metrics))?))?;
    }
    Ok(())
}

fn parse_seeds(kv: &KvMap) -> Result<Vec<u64>> {
    Ok(kv.get_list("seeds").map_err(usage)?.unwrap_or_else(|| mmdet_core::eval::DEFAULT_SEEDS.to_vec()))
}

fn select(videos: [Vec<PreparedVideo>; 3], split: &str) -> Result<Vec<PreparedVideo>> {
    let [train, val, test] = videos;
    Ok(match split {
        "train" => train,
        "val" => val,
        "test" => test,
        "all" => train.into_iter().chain(val).chain(test).collect(),
        other => return Err(usage(format!("split must be train, val, test or all, got {other:?}"))),
    })
}

/// One AUC per fake generator: its fakes against every real video.
fn generator_groups(m: &Manifest, videos: &[PreparedVideo]) -> Vec<(String, Vec<usize>)> {
    let by_id: std::collections::HashMap<String, &ManifestEntry> = m.entries.iter().map(|e| (e.id(), e)).collect();
    let mut tags: Vec<String> = Vec::new();
    for v in videos.iter().filter(|v| v.label() == Label::Fake) {
        let g = by_id.get(v.id()).map_or("fake".to_string(), |e| e.generator.clone());
        if !tags.contains(&g) {
            tags.push(g);
        }
    }
    if tags.is_empty() {
        // no fakes: a single group whose AUC reports the missing class
        return vec![("all".into(), (0..videos.len()).collect())];
    }
    tags.into_iter()
        .map(|t| {
            let idx = videos
                .iter()
                .enumerate()
                .filter(|(_, v)| v.label() == Label::Real || by_id.get(v.id()).is_some_and(|e| e.generator == t))
                .map(|(i, _)| i)
                .collect();
            (t, idx)
        })
        .collect()
}

pub fn eval(kv: &KvMap, out: &Path) -> Result<()> {
    let ck_path = path(kv, "ckpt")?;
    let ck = Checkpoint::load(&ck_path).with_context(|| format!("loading {}", ck_path.display()))?;
    let model = Detector::from_checkpoint(&ck)?;
    let mut kv = kv.clone();
    if let Some(text) = ck.text("run_config") {
        let stored = KvMap::parse(&text)?;
        for k in ["vqvae", "provider", "sigma", "features", "provider_seed", "interval", "clip_len", "crop"] {
            if let (None, Some(v)) = (kv.get_str(k), stored.get_str(k)) {
                kv.set(k, v);
            }
        }
    }
    let seeds = parse_seeds(&kv)?;
    log_config("eval", &kv);
    let d = TrainConfig::default();
    let (clip_len, crop) = (get(&kv, "clip_len", d.clip_len)?, get(&kv, "crop", d.crop)?);
    let stride = match get(&kv, "stride", 0usize)? {
        0 => clip_len,
        s => s,
    };
    let p = provider(&kv)?;
    let m = load_manifest(&kv, "manifest")?;
    let videos = select(prepared_splits(&kv, crop)?, kv.get_str("split").unwrap_or("test"))?;
    let groups = generator_groups(&m, &videos);
    let report = multi_seed_report(&seeds, |seed| {
        groups
            .iter()
            .map(|(tag, idx)| {
                let subset: Vec<PreparedVideo> = idx.iter().map(|&i| videos[i].clone()).collect();
                let t = score_videos(&subset, &model, p.as_ref(), clip_len, stride, seed, tag)?;
                Ok((tag.clone(), t.auc()?))
            })
            .collect()
    })?;
    for s in &report.summary {
        info!("{}: AUC {:.4} ± {:.4} over {} seeds", s.tag, s.mean, s.std, s.runs);
    }
    std::fs::write(out, report.to_csv())?;
    Ok(())
}

pub fn perturb(kv: &KvMap, out: &Path) -> Result<()> {
    log_config("perturb", kv);
    let kind = kv.get_str("kind").unwrap_or_default();
    let p = Perturbation::from_kind(kind).map_err(usage)?;
    let m = load_manifest(kv, "input")?;
    let clips = load_clips(&m, None)?;
    let perturbed: Vec<_> = clips.iter().map(|(c, _)| perturb_clip(c, &p)).collect::<Result<_, _>>()?;
    let splits: Vec<Split> = clips.iter().map(|(_, s)| *s).collect();
    let mut pm = write_clips(out, &perturbed, &splits, "")?;
    for (e, src) in pm.entries.iter_mut().zip(&m.entries) {
        e.generator = src.generator.clone();
    }
    pm.save(&out.join(mmdet_core::corpus::MANIFEST_FILE))?;
    info!("wrote {} {} clips to {}", pm.entries.len(), p.tag(), out.display());
    Ok(())
}

fn subset_of(v: &Variant, allowed: &Variant) -> bool {
    (!v.recon || allowed.recon) && (!v.iafa || allowed.iafa) && (!v.mmfr || allowed.mmfr) && (!v.fusion || allowed.fusion)
}

pub fn ablate(kv: &KvMap, out: &Path) -> Result<()> {
    let tc = train_config(kv)?;
    let allowed = Variant::parse(kv.get_str("flags").unwrap_or("recon,iafa,mmfr,fusion")).map_err(usage)?;
    let seeds = parse_seeds(kv)?;
    if seeds.len() < 2 {
        return Err(usage(format!("need at least 2 seeds, got {}", seeds.len())));
    }
    let mut base = DetectorConfig::from_kv(kv).map_err(usage)?;
    base.variant = allowed;
    log_config("ablate", kv);
    let p = provider(kv)?;
    let [train, val, test] = prepared_splits(kv, tc.crop)?;
    let bench = mmdet_core::pipeline::Bench { vq: load_vq(kv)?, vq_losses: Vec::new(), train, val, test };
    let mut results = Vec::new();
    for v in Variant::table_rows().into_iter().filter(|v| subset_of(v, &allowed)) {
        let r = ablation_run(v, &base, &tc, &bench, p.as_ref(), &seeds)?;
        if let Some(s) = r.summary.first() {
            info!("{}: AUC {:.4} ± {:.4}", s.tag, s.mean, s.std);
        }
        results.extend(r.results);
    }
    std::fs::write(out, SeedReport::from_results(results).to_csv())?;
    Ok(())
}

pub fn probe(kv: &KvMap, files: &[std::path::PathBuf], out: &Path) -> Result<()> {
    let seed = require_seed(kv)?;
    log_config("probe", kv);
    let mut layers = Vec::new();
    let mut labels: Option<Vec<Label>> = None;
    for f in files {
        let rows = parse_features_csv(&std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?)?;
        let l: Vec<Label> = rows.iter().map(|r| r.1).collect();
        match &labels {
            Some(prev) if *prev != l => bail!("{}: labels differ from the first feature file", f.display()),
            Some(_) => {}
            None => labels = Some(l),
        }
        layers.push(rows.into_iter().map(|r| r.2).collect::<Vec<_>>());
    }
    let acc = layer_probe(&layers, &labels.unwrap_or_default(), &KMeansConfig { seed, ..Default::default() })?;
    let mut csv = String::from("layer,accuracy\n");
    for (i, a) in acc.iter().enumerate() {
        csv.push_str(&format!("{i},{a:.6}\n"));
    }
    std::fs::write(out, csv)?;
    Ok(())
}

pub fn export_features_mock(kv: &KvMap, out: &Path) -> Result<()> {
    let seed = require_seed(kv)?;
    log_config("export-features-mock", kv);
    let interval = get(kv, "interval", MockConfig::default().interval_s)?;
    let mock = MockProvider::new(MockConfig { seed, sigma: get(kv, "sigma", 1.0f32)?, interval_s: interval });
    let m = load_manifest(kv, "manifest")?;
    let mut records: Vec<MmfrRecord> = Vec::new();
    for e in &m.entries {
        let clip = m.load_clip(e)?;
        let duration = clip.n as f64 / clip.fps as f64;
        for t in cache_times(duration, interval) {
            let frame = mock.cached_frame(t, clip.fps)?;
            records.push(mock.record(&frame_key(&clip.id, frame), e.label));
        }
    }
    write_features(out, &records)?;
    info!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}
