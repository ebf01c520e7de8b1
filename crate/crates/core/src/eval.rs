//! Video-level scoring, exact AUC, multi-seed summaries and the
//! clustering probe over per-layer features.

use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::Label;
use crate::dataset::PreparedVideo;
use crate::detector::{Detector, ModelError};
use crate::mmfr::FeatureProvider;
use crate::numerics::SplitMix64;
use crate::parallel::par_map;

pub const DEFAULT_SEEDS: [u64; 5] = [1, 100, 999, 1234, 9999];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC needs both classes; got {fakes} fake and {reals} real scores (SingleClass)")]
    SingleClass { fakes: usize, reals: usize },
    #[error("video {id} has {len} frames, clip length is {clip_len}")]
    VideoTooShort { id: String, len: usize, clip_len: usize },
    #[error("non-finite score for {0}")]
    NonFiniteScore(String),
    #[error("features of layer {layer} have zero variance")]
    DegenerateFeatures { layer: usize },
    #[error("layer {layer}: {found} samples, need at least {needed}")]
    TooFewSamples { layer: usize, found: usize, needed: usize },
    #[error("need at least 2 seeds, got {0}")]
    TooFewSeeds(usize),
    #[error("{0}")]
    BadParam(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub label: Label,
    pub score: f64,
    pub seed: u64,
    pub tag: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn auc(&self) -> Result<f64, EvalError> {
        let pairs: Vec<(Label, f64)> = self.rows.iter().map(|r| (r.label, r.score)).collect();
        auc(&pairs)
    }
}

/// Probability that a random fake outscores a random real, ties counted
/// one half, from tie-averaged ranks.
pub fn auc(scores: &[(Label, f64)]) -> Result<f64, EvalError> {
    if let Some(i) = scores.iter().position(|(_, s)| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(format!("entry {i}")));
    }
    let fakes = scores.iter().filter(|(l, _)| *l == Label::Fake).count();
    let reals = scores.len() - fakes;
    if fakes == 0 || reals == 0 {
        return Err(EvalError::SingleClass { fakes, reals });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].1.total_cmp(&scores[b].1));
    // doubled ranks keep tie averages integral
    let mut fake_rank2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].1 == scores[order[i]].1 {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u64;
        let tied_fakes = order[i..=j].iter().filter(|&&k| scores[k].0 == Label::Fake).count() as u64;
        fake_rank2 += rank2 * tied_fakes;
        i = j + 1;
    }
    let (nf, nr) = (fakes as u64, reals as u64);
    // 2U = 2·R_f − nf(nf+1)
    let u2 = fake_rank2 - nf * (nf + 1);
    Ok(u2 as f64 / (2 * nf * nr) as f64)
}

/// Start indices of windows of `clip_len` frames, `stride` apart, from
/// `offset`.
pub fn window_starts(n: usize, clip_len: usize, stride: usize, offset: usize) -> Vec<usize> {
    if clip_len == 0 || stride == 0 || offset + clip_len > n {
        return Vec::new();
    }
    (offset..=n - clip_len).step_by(stride).collect()
}

/// First-window offset for a video under an evaluation seed, uniform over
/// the offsets that do not change the window count beyond the first stride.
pub fn eval_offset(seed: u64, video_id: &str, n: usize, clip_len: usize, stride: usize) -> usize {
    if n < clip_len || stride == 0 {
        return 0;
    }
    let choices = stride.min(n - clip_len + 1);
    let mut rng = SplitMix64::derived(seed, crate::numerics::rng::fnv1a64(video_id.as_bytes()));
    rng.below(choices)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `σ(logit)` over the sliding windows of a video.
pub fn score_video(
    video: &PreparedVideo,
    model: &Detector,
    provider: &dyn FeatureProvider,
    clip_len: usize,
    stride: usize,
    offset: usize,
) -> Result<f64, EvalError> {
    if video.len() < clip_len || clip_len == 0 {
        return Err(EvalError::VideoTooShort { id: video.id().to_string(), len: video.len(), clip_len });
    }
    if stride == 0 || offset + clip_len > video.len() {
        return Err(EvalError::BadParam(format!("stride {stride}, offset {offset} for {} frames", video.len())));
    }
    let starts = window_starts(video.len(), clip_len, stride, offset);
    let mut total = 0.0;
    for &s in &starts {
        let logit = video.logit(model, provider, s, clip_len)? as f64;
        if !logit.is_finite() {
            return Err(EvalError::NonFiniteScore(video.id().to_string()));
        }
        total += sigmoid(logit);
    }
    Ok(total / starts.len() as f64)
}

/// Scores every video under one evaluation seed.
pub fn score_videos(
    videos: &[PreparedVideo],
    model: &Detector,
    provider: &dyn FeatureProvider,
    clip_len: usize,
    stride: usize,
    seed: u64,
    tag: &str,
) -> Result<ScoreTable, EvalError> {
    let rows = par_map(videos, |v| {
        let offset = eval_offset(seed, v.id(), v.len(), clip_len, stride);
        let score = score_video(v, model, provider, clip_len, stride, offset)?;
        Ok(ScoreRow { id: v.id().to_string(), label: v.label(), score, seed, tag: tag.to_string() })
    });
    Ok(ScoreTable { rows: rows.into_iter().collect::<Result<_, EvalError>>()? })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub tag: String,
    pub seed: u64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedSummary {
    pub tag: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeedReport {
    pub results: Vec<SeedResult>,
    pub summary: Vec<SeedSummary>,
}

impl SeedReport {
    /// Groups results by tag in first-appearance order.
    pub fn from_results(results: Vec<SeedResult>) -> Self {
        let mut tags: Vec<&str> = Vec::new();
        for r in &results {
            if !tags.contains(&r.tag.as_str()) {
                tags.push(&r.tag);
            }
        }
        let summary = tags
            .iter()
            .map(|t| {
                let v: Vec<f64> = results.iter().filter(|r| r.tag == *t).map(|r| r.auc).collect();
                let (mean, std) = mean_std(&v);
                SeedSummary { tag: t.to_string(), mean, std, runs: v.len() }
            })
            .collect();
        Self { results, summary }
    }

    /// Per-run rows, a blank line, then the per-tag summary.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset_tag,seed,auc\n");
        for r in &self.results {
            let _ = writeln!(out, "{},{},{:.6}", r.tag, r.seed, r.auc);
        }
        out.push_str("\ndataset_tag,mean,std\n");
        for s in &self.summary {
            let _ = writeln!(out, "{},{:.6},{:.6}", s.tag, s.mean, s.std);
        }
        out
    }

    pub fn summary_for(&self, tag: &str) -> Option<&SeedSummary> {
        self.summary.iter().find(|s| s.tag == tag)
    }
}

/// Runs `run` once per seed; each call returns `(tag, auc)` pairs.
pub fn multi_seed_report<F>(seeds: &[u64], mut run: F) -> Result<SeedReport, EvalError>
where
    F: FnMut(u64) -> Result<Vec<(String, f64)>, EvalError>,
{
    if seeds.len() < 2 {
        return Err(EvalError::TooFewSeeds(seeds.len()));
    }
    let mut results = Vec::new();
    for &seed in seeds {
        for (tag, auc) in run(seed)? {
            results.push(SeedResult { tag, seed, auc });
        }
    }
    Ok(SeedReport::from_results(results))
}

/// Feature dump rows `id,label,f_0..f_{D-1}`.
pub fn features_csv(rows: &[(String, Label, Vec<f32>)]) -> String {
    let d = rows.first().map_or(0, |r| r.2.len());
    let mut out = String::from("id,label");
    for j in 0..d {
        let _ = write!(out, ",f_{j}");
    }
    out.push('\n');
    for (id, label, f) in rows {
        let _ = write!(out, "{id},{}", label.as_str());
        for v in f {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Parses a feature dump back into `(id, label, features)`.
pub fn parse_features_csv(text: &str) -> Result<Vec<(String, Label, Vec<f64>)>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let id = parts.next().unwrap_or("").to_string();
        let label = parts
            .next()
            .and_then(Label::parse)
            .ok_or_else(|| EvalError::BadParam(format!("line {}: bad label", i + 1)))?;
        let f = parts
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| EvalError::BadParam(format!("line {}: bad feature value", i + 1)))?;
        out.push((id, label, f));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { k: 2, restarts: 20, max_iters: 100, tol: 1e-6, seed: 0 }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Within-cluster sum of squares of an assignment.
pub fn inertia(points: &[Vec<f64>], assign: &[usize], k: usize) -> f64 {
    let d = points[0].len();
    let mut centers = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (c, v) in centers[a].iter_mut().zip(p) {
            *c += v;
        }
    }
    for (c, &n) in centers.iter_mut().zip(&counts) {
        if n > 0 {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    points.iter().zip(assign).map(|(p, &a)| dist2(p, &centers[a])).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

/// Lloyd's algorithm from `restarts` random initialisations (distinct
/// sample points as centers); returns the assignment of lowest inertia.
pub fn kmeans(points: &[Vec<f64>], cfg: &KMeansConfig) -> Vec<usize> {
    let n = points.len();
    let mut rng = SplitMix64::derived(cfg.seed, 0x4B4D);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..cfg.restarts.max(1) {
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let mut centers: Vec<Vec<f64>> = idx[..cfg.k].iter().map(|&i| points[i].clone()).collect();
        let mut assign = vec![0; n];
        for _ in 0..cfg.max_iters {
            for (a, p) in assign.iter_mut().zip(points) {
                *a = nearest(p, &centers);
            }
            let mut shift = 0.0f64;
            for (j, c) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                let mut m = vec![0.0; c.len()];
                for p in &members {
                    m.iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
                }
                m.iter_mut().for_each(|v| *v /= members.len() as f64);
                shift = shift.max(dist2(&m, c).sqrt());
                *c = m;
            }
            if shift < cfg.tol {
                break;
            }
        }
        for (a, p) in assign.iter_mut().zip(points) {
            *a = nearest(p, &centers);
        }
        let w = inertia(points, &assign, cfg.k);
        if best.as_ref().is_none_or(|(bw, _)| w < *bw) {
            best = Some((w, assign));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}

/// Fraction of samples whose two-cluster assignment matches the labels,
/// under the better of the two cluster-to-label maps.
pub fn cluster_accuracy(assign: &[usize], labels: &[Label]) -> f64 {
    let agree = assign.iter().zip(labels).filter(|(&a, &l)| (a == 1) == (l == Label::Fake)).count();
    let n = assign.len();
    agree.max(n - agree) as f64 / n as f64
}

/// Two-cluster k-means accuracy for each layer's features.
pub fn layer_probe(layers: &[Vec<Vec<f64>>], labels: &[Label], cfg: &KMeansConfig) -> Result<Vec<f64>, EvalError> {
    if cfg.k != 2 {
        return Err(EvalError::BadParam(format!("probe uses k=2, got {}", cfg.k)));
    }
    layers
        .iter()
        .enumerate()
        .map(|(layer, pts)| {
            if pts.len() < 2 * cfg.k || pts.len() != labels.len() {
                return Err(EvalError::TooFewSamples { layer, found: pts.len(), needed: (2 * cfg.k).max(labels.len()) });
            }
            let d = pts[0].len();
            if d == 0 || pts.iter().any(|p| p.len() != d) {
                return Err(EvalError::BadParam(format!("layer {layer}: ragged features")));
            }
            let varies = (0..d).any(|j| pts.iter().any(|p| p[j] != pts[0][j]));
            if !varies {
                return Err(EvalError::DegenerateFeatures { layer });
            }
            Ok(cluster_accuracy(&kmeans(pts, cfg), labels))
        })
        .collect()
}
