//! Multi-modal forgery representation: per-frame vision and language
//! features from an external provider, projected to the detector width.
//!
//! Feature file layout, little-endian: `"MMFR"` | version u32 = 1 |
//! record count u32 | per record: key length u16, UTF-8 key,
//! 1024 f32 vision features, 64×4096 f32 language features.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::corpus::Label;
use crate::layers::Linear;
use crate::numerics::rng::{derive_seed, fnv1a64};
use crate::numerics::{Element, NumericsError, ParamStore, Session, SplitMix64, Var};

pub const FV_DIM: usize = 1024;
pub const FL_TOKENS: usize = 64;
pub const FL_DIM: usize = 4096;
/// Rows of the projected representation: one vision row plus the language
/// tokens.
pub const M_ROWS: usize = 1 + FL_TOKENS;
pub const DEFAULT_INTERVAL_S: f64 = 6.0;

const MAGIC: &[u8; 4] = b"MMFR";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MmfrError {
    #[error("not a feature file (bad magic)")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u32),
    #[error("feature file truncated at byte offset {offset}")]
    TruncatedFile { offset: u64 },
    #[error("record {record}: {msg}")]
    DimMismatch { record: usize, msg: String },
    #[error("record {record}: {msg}")]
    InvalidRecord { record: usize, msg: String },
    #[error("no cached records")]
    NoRecords,
    #[error("no features for video {0}")]
    MissingVideo(String),
    #[error("invalid cache interval {0}")]
    BadInterval(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("feature file I/O: {0}")]
    Io(std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Mock,
    File,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmfrRecord {
    pub key: String,
    /// Pooled vision feature, `FV_DIM` values.
    pub f_v: Vec<f32>,
    /// Language hidden states, `FL_TOKENS × FL_DIM` row-major.
    pub f_l: Vec<f32>,
    pub provenance: Provenance,
}

impl MmfrRecord {
    pub fn validate(&self, record: usize) -> Result<(), MmfrError> {
        if self.f_v.len() != FV_DIM {
            return Err(MmfrError::DimMismatch { record, msg: format!("F_V has {} values, expected {FV_DIM}", self.f_v.len()) });
        }
        if self.f_l.len() != FL_TOKENS * FL_DIM {
            return Err(MmfrError::DimMismatch {
                record,
                msg: format!("F_L has {} values, expected {FL_TOKENS}x{FL_DIM}", self.f_l.len()),
            });
        }
        if !self.f_v.iter().chain(&self.f_l).all(|v| v.is_finite()) {
            return Err(MmfrError::InvalidRecord { record, msg: "non-finite feature".into() });
        }
        Ok(())
    }
}

/// `"{video_id}#{frame_index}"`
pub fn frame_key(video_id: &str, frame_index: usize) -> String {
    format!("{video_id}#{frame_index}")
}

/// Splits a frame key at its last `#`.
pub fn parse_frame_key(key: &str) -> Option<(&str, usize)> {
    let (v, f) = key.rsplit_once('#')?;
    Some((v, f.parse().ok()?))
}

/// Two independent affine maps to the shared width D.
#[derive(Clone, Debug)]
pub struct MmfrProjector {
    pub proj_v: Linear,
    pub proj_l: Linear,
    pub dim: usize,
}

impl MmfrProjector {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut SplitMix64) -> Result<Self, NumericsError> {
        Ok(Self {
            proj_v: Linear::new(store, &format!("{name}.proj_v"), FV_DIM, dim, rng)?,
            proj_l: Linear::new(store, &format!("{name}.proj_l"), FL_DIM, dim, rng)?,
            dim,
        })
    }

    /// `[M_ROWS × D]`: row 0 is the projected vision feature, rows 1.. the
    /// projected language tokens.
    pub fn project_and_concat<T: Element>(&self, s: &mut Session<T>, rec: &MmfrRecord) -> Result<Var, MmfrError> {
        rec.validate(0)?;
        let cast = |v: &[f32]| v.iter().map(|&x| T::from_f64(x as f64)).collect::<Vec<T>>();
        let fv = s.g.constant_from(&[1, FV_DIM], cast(&rec.f_v))?;
        let fl = s.g.constant_from(&[FL_TOKENS, FL_DIM], cast(&rec.f_l))?;
        let v = self.proj_v.forward(s, fv)?;
        let l = self.proj_l.forward(s, fl)?;
        Ok(s.g.concat_rows(&[v, l])?)
    }
}

/// Nearest cached record to `timestamp_s`, earlier one on ties.
/// `records` holds `(timestamp, record)` pairs in any order.
pub fn cached_lookup<'a, R>(records: &'a [(f64, R)], timestamp_s: f64, interval_s: f64) -> Result<&'a R, MmfrError> {
    if !(interval_s.is_finite() && interval_s > 0.0) {
        return Err(MmfrError::BadInterval(interval_s));
    }
    let mut best: Option<(f64, f64, &R)> = None;
    for (t, r) in records {
        let d = (t - timestamp_s).abs();
        let better = match best {
            None => true,
            Some((bd, bt, _)) => d < bd || (d == bd && *t < bt),
        };
        if better {
            best = Some((d, *t, r));
        }
    }
    best.map(|b| b.2).ok_or(MmfrError::NoRecords)
}

/// Timestamps at which features are cached for a video of `duration_s`.
pub fn cache_times(duration_s: f64, interval_s: f64) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut k = 1.0;
    while k * interval_s < duration_s {
        out.push(k * interval_s);
        k += 1.0;
    }
    out
}

/// Source of per-frame features for a clip.
pub trait FeatureProvider: Sync {
    /// Record cached nearest to `timestamp_s` within the video.
    fn lookup(&self, video_id: &str, label: Label, timestamp_s: f64, fps: f32) -> Result<Cow<'_, MmfrRecord>, MmfrError>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MockConfig {
    pub seed: u64,
    /// Label signal strength σ_s in `[0,1]`; 0 makes features label-free.
    pub sigma: f32,
    pub interval_s: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self { seed: 0, sigma: 1.0, interval_s: DEFAULT_INTERVAL_S }
    }
}

/// Shift magnitude along the label direction at σ_s = 1, in units of the
/// per-coordinate noise standard deviation.
pub const MOCK_GAIN: f32 = 4.0;

/// Deterministic synthetic features: unit Gaussian noise keyed by
/// `(seed, frame key)`, shifted by `±σ_s·MOCK_GAIN` along fixed unit
/// directions (plus for fake, minus for real).
#[derive(Clone, Debug)]
pub struct MockProvider {
    pub cfg: MockConfig,
    dir_v: Vec<f32>,
    dir_l: Vec<f32>,
}

fn unit_direction(seed: u64, stream: u64, n: usize) -> Vec<f32> {
    let mut rng = SplitMix64::derived(seed, stream);
    let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

impl MockProvider {
    pub fn new(cfg: MockConfig) -> Self {
        Self { cfg, dir_v: unit_direction(cfg.seed, 0xD1, FV_DIM), dir_l: unit_direction(cfg.seed, 0xD2, FL_DIM) }
    }

    pub fn direction_v(&self) -> &[f32] {
        &self.dir_v
    }

    pub fn record(&self, key: &str, label: Label) -> MmfrRecord {
        let mut rng = SplitMix64::new(derive_seed(self.cfg.seed, fnv1a64(key.as_bytes())));
        let mut f_v = vec![0f32; FV_DIM];
        let mut f_l = vec![0f32; FL_TOKENS * FL_DIM];
        rng.fill_normal_f32(&mut f_v);
        rng.fill_normal_f32(&mut f_l);
        let sign = match label {
            Label::Fake => 1.0,
            Label::Real => -1.0,
        };
        let shift = sign * self.cfg.sigma * MOCK_GAIN;
        if shift != 0.0 {
            for (x, u) in f_v.iter_mut().zip(&self.dir_v) {
                *x += shift * u;
            }
            for row in f_l.chunks_exact_mut(FL_DIM) {
                for (x, u) in row.iter_mut().zip(&self.dir_l) {
                    *x += shift * u;
                }
            }
        }
        MmfrRecord { key: key.to_string(), f_v, f_l, provenance: Provenance::Mock }
    }

    /// Frame index of the cache slot nearest to `timestamp_s`.
    pub fn cached_frame(&self, timestamp_s: f64, fps: f32) -> Result<usize, MmfrError> {
        let i = self.cfg.interval_s;
        if !(i.is_finite() && i > 0.0) {
            return Err(MmfrError::BadInterval(i));
        }
        // nearest grid point, ties toward the earlier one
        let k = ((timestamp_s.max(0.0) / i) - 0.5).ceil().max(0.0);
        Ok((k * i * fps as f64).round() as usize)
    }
}

impl FeatureProvider for MockProvider {
    fn lookup(&self, video_id: &str, label: Label, timestamp_s: f64, fps: f32) -> Result<Cow<'_, MmfrRecord>, MmfrError> {
        let frame = self.cached_frame(timestamp_s, fps)?;
        Ok(Cow::Owned(self.record(&frame_key(video_id, frame), label)))
    }
}

/// Records loaded from a feature file, grouped per video.
#[derive(Clone, Debug, Default)]
pub struct FeatureMap {
    pub records: BTreeMap<String, MmfrRecord>,
    pub interval_s: f64,
}

impl FeatureMap {
    pub fn new(records: Vec<MmfrRecord>) -> Self {
        let records = records.into_iter().map(|r| (r.key.clone(), r)).collect();
        Self { records, interval_s: DEFAULT_INTERVAL_S }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn video_records(&self, video_id: &str) -> Vec<(usize, &MmfrRecord)> {
        let lo = format!("{video_id}#");
        self.records
            .range(lo.clone()..)
            .take_while(|(k, _)| k.starts_with(&lo))
            .filter_map(|(k, r)| parse_frame_key(k).filter(|(v, _)| *v == video_id).map(|(_, f)| (f, r)))
            .collect()
    }
}

impl FeatureProvider for FeatureMap {
    fn lookup(&self, video_id: &str, _label: Label, timestamp_s: f64, fps: f32) -> Result<Cow<'_, MmfrRecord>, MmfrError> {
        let recs: Vec<(f64, &MmfrRecord)> =
            self.video_records(video_id).into_iter().map(|(f, r)| (f as f64 / fps as f64, r)).collect();
        if recs.is_empty() {
            return Err(MmfrError::MissingVideo(video_id.to_string()));
        }
        Ok(Cow::Borrowed(*cached_lookup(&recs, timestamp_s, self.interval_s)?))
    }
}

fn io(e: std::io::Error) -> MmfrError {
    MmfrError::Io(e)
}

pub fn write_features_to(out: &mut impl Write, records: &[MmfrRecord]) -> Result<(), MmfrError> {
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(records.len() as u32).to_le_bytes()).map_err(io)?;
    let mut buf = Vec::new();
    for (i, r) in records.iter().enumerate() {
        r.validate(i)?;
        if r.key.len() > u16::MAX as usize {
            return Err(MmfrError::InvalidRecord { record: i, msg: "key longer than 65535 bytes".into() });
        }
        buf.clear();
        buf.extend_from_slice(&(r.key.len() as u16).to_le_bytes());
        buf.extend_from_slice(r.key.as_bytes());
        for v in r.f_v.iter().chain(&r.f_l) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

pub fn write_features(path: &Path, records: &[MmfrRecord]) -> Result<(), MmfrError> {
    let f = std::fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(f);
    write_features_to(&mut w, records)?;
    w.flush().map_err(io)
}

/// Streaming reader that reports the byte offset where data ran out.
struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<(), MmfrError> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => return Err(MmfrError::TruncatedFile { offset: self.offset + got as u64 }),
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(io(e)),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, MmfrError> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32s(&mut self, out: &mut [f32], scratch: &mut Vec<u8>) -> Result<(), MmfrError> {
        scratch.resize(out.len() * 4, 0);
        self.fill(scratch)?;
        for (o, c) in out.iter_mut().zip(scratch.chunks_exact(4)) {
            *o = f32::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }
}

pub fn read_features_from(input: impl Read) -> Result<Vec<MmfrRecord>, MmfrError> {
    let mut r = Counted { inner: input, offset: 0 };
    let mut magic = [0u8; 4];
    r.fill(&mut magic).map_err(|_| MmfrError::BadMagic)?;
    if &magic != MAGIC {
        return Err(MmfrError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(MmfrError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::new();
    let mut scratch = Vec::new();
    for i in 0..count {
        let mut len = [0u8; 2];
        r.fill(&mut len)?;
        let mut key = vec![0u8; u16::from_le_bytes(len) as usize];
        r.fill(&mut key)?;
        let key = String::from_utf8(key).map_err(|_| MmfrError::InvalidRecord { record: i, msg: "key is not UTF-8".into() })?;
        let mut f_v = vec![0f32; FV_DIM];
        r.f32s(&mut f_v, &mut scratch)?;
        let mut f_l = vec![0f32; FL_TOKENS * FL_DIM];
        r.f32s(&mut f_l, &mut scratch)?;
        let rec = MmfrRecord { key, f_v, f_l, provenance: Provenance::File };
        rec.validate(i)?;
        records.push(rec);
    }
    let mut extra = [0u8; 1];
    if r.inner.read(&mut extra).map_err(io)? != 0 {
        return Err(MmfrError::InvalidRecord { record: count, msg: format!("trailing bytes after {count} records") });
    }
    Ok(records)
}

/// Reads every record of a feature file into a keyed map.
pub fn load_features(path: &Path) -> Result<FeatureMap, MmfrError> {
    let f = std::fs::File::open(path).map_err(io)?;
    let records = read_features_from(BufReader::new(f))?;
    let n = records.len();
    let map = FeatureMap::new(records);
    if map.len() != n {
        return Err(MmfrError::InvalidRecord { record: n, msg: "duplicate frame keys".into() });
    }
    log::info!("loaded {n} feature records from {}", path.display());
    Ok(map)
}
