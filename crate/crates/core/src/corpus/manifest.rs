//! Tab-separated manifest: `path \t label \t split \t generator`, one clip
//! per line. Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{read_clip, CorpusError, Label, VideoClip};
use crate::numerics::SplitMix64;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    /// Deterministic split of `count` items: 20% test, then the remainder
    /// 9:1 train:val.
    pub fn assign(count: usize, seed: u64) -> Vec<Split> {
        let mut order: Vec<usize> = (0..count).collect();
        SplitMix64::derived(seed, 0x5EED_5B17).shuffle(&mut order);
        let test = (count as f64 * 0.2).round() as usize;
        let val = ((count - test) as f64 / 10.0).round() as usize;
        let mut out = vec![Split::Train; count];
        for (rank, &i) in order.iter().enumerate() {
            out[i] = if rank < test {
                Split::Test
            } else if rank < test + val {
                Split::Val
            } else {
                Split::Train
            };
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    pub split: Split,
    pub generator: String,
}

impl ManifestEntry {
    /// Clip id: the file stem.
    pub fn id(&self) -> String {
        self.path.file_stem().and_then(|s| s.to_str()).unwrap_or("clip").to_string()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), entries: Vec::new() }
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self, CorpusError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| CorpusError::Manifest { line: line_no, msg };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(err(format!("expected 4 tab-separated fields, got {}", cols.len())));
            }
            let label = Label::parse(cols[1]).ok_or_else(|| err(format!("bad label {:?}", cols[1])))?;
            let split = Split::parse(cols[2]).ok_or_else(|| err(format!("bad split {:?}", cols[2])))?;
            if !seen.insert(cols[0].to_string()) {
                return Err(err(format!("duplicate path {}", cols[0])));
            }
            entries.push(ManifestEntry { path: PathBuf::from(cols[0]), label, split, generator: cols[3].to_string() });
        }
        Ok(Self { root: root.into(), entries })
    }

    /// Reads a manifest file and checks that every referenced clip exists.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, root)?;
        for (i, e) in m.entries.iter().enumerate() {
            if !m.resolve(e).is_file() {
                return Err(CorpusError::Manifest { line: i + 1, msg: format!("missing file {}", e.path.display()) });
            }
        }
        Ok(m)
    }

    /// Loads `dir/manifest.tsv`, or `path` itself when it is a file.
    pub fn load_dir_or_file(path: &Path) -> Result<Self, CorpusError> {
        if path.is_dir() {
            Self::load(&path.join(MANIFEST_FILE))
        } else {
            Self::load(path)
        }
    }

    pub fn resolve(&self, e: &ManifestEntry) -> PathBuf {
        if e.path.is_absolute() {
            e.path.clone()
        } else {
            self.root.join(&e.path)
        }
    }

    pub fn load_clip(&self, e: &ManifestEntry) -> Result<VideoClip, CorpusError> {
        let mut clip = read_clip(&self.resolve(e))?;
        clip.label = e.label;
        Ok(clip)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", e.path.display(), e.label.as_str(), e.split.as_str(), e.generator);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_text()).map_err(|e| CorpusError::io(path, e))
    }

    pub fn filter(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split, label: Label) -> usize {
        self.filter(split).filter(|e| e.label == label).count()
    }
}
