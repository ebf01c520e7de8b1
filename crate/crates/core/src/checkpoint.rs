//! Named-tensor checkpoint files.
//!
//! Layout, little-endian: `"MMDC"` | version u32 | tensor count u32 | per
//! tensor: name length u16, UTF-8 name, rank u8, rank × u32 dims, f32 data.
//!
//! Non-parameter state travels as reserved tensors: names under `meta.` hold
//! integers as 16-bit limbs or UTF-8 text as one byte per element, and names
//! under `adam.` hold optimizer moments.

use std::path::Path;

use thiserror::Error;

use crate::binio::{put_f32s, put_u16, put_u32, Reader, Truncated};
use crate::numerics::{Adam, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MMDC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte offset {offset}")]
    TruncatedFile { offset: usize },
    #[error("invalid checkpoint entry: {0}")]
    InvalidEntry(String),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint has unknown tensor {0}")]
    UnknownTensor(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl From<Truncated> for CheckpointError {
    fn from(t: Truncated) -> Self {
        CheckpointError::TruncatedFile { offset: t.offset }
    }
}

/// Ordered table of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

fn is_reserved(name: &str) -> bool {
    name.starts_with("meta.") || name.starts_with("adam.") || name.starts_with("best.")
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_store(store: &ParamStore) -> Self {
        let tensors = store.iter().map(|(n, t)| (n.to_string(), Tensor::new(t.shape(), t.data().to_vec()).unwrap())).collect();
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.tensors.push((name, t)),
        }
    }

    pub fn set_u64(&mut self, key: &str, v: u64) {
        let limbs: Vec<f32> = (0..4).map(|i| ((v >> (16 * i)) & 0xFFFF) as f32).collect();
        self.insert(format!("meta.{key}"), Tensor::new(&[4], limbs).unwrap());
    }

    pub fn u64(&self, key: &str) -> Option<u64> {
        let t = self.get(&format!("meta.{key}"))?;
        if t.numel() != 4 {
            return None;
        }
        Some(t.data().iter().enumerate().fold(0u64, |acc, (i, &l)| acc | ((l as u64) << (16 * i))))
    }

    pub fn set_text(&mut self, key: &str, text: &str) {
        let mut bytes: Vec<f32> = text.bytes().map(f32::from).collect();
        if bytes.is_empty() {
            bytes.push(0.0);
        }
        self.insert(format!("meta.{key}"), Tensor::new(&[bytes.len()], bytes).unwrap());
    }

    pub fn text(&self, key: &str) -> Option<String> {
        let t = self.get(&format!("meta.{key}"))?;
        let bytes: Vec<u8> = t.data().iter().map(|&b| b as u8).filter(|&b| b != 0).collect();
        String::from_utf8(bytes).ok()
    }

    pub fn set_f32(&mut self, key: &str, v: f32) {
        self.insert(format!("meta.{key}"), Tensor::scalar(v));
    }

    pub fn f32(&self, key: &str) -> Option<f32> {
        self.get(&format!("meta.{key}")).map(|t| t.data()[0])
    }

    pub fn set_adam(&mut self, store: &ParamStore, adam: &Adam) {
        self.set_u64("adam_step", adam.step_count());
        let (m, v) = adam.moments();
        for ((id, mi), vi) in store.ids().zip(m).zip(v) {
            let shape = store.get(id).shape();
            self.insert(format!("adam.m.{}", store.name(id)), Tensor::new(shape, mi.clone()).unwrap());
            self.insert(format!("adam.v.{}", store.name(id)), Tensor::new(shape, vi.clone()).unwrap());
        }
    }

    /// Restores optimizer moments saved by [`Checkpoint::set_adam`].
    pub fn restore_adam(&self, store: &ParamStore, adam: &mut Adam) -> Result<(), CheckpointError> {
        let step = self.u64("adam_step").ok_or_else(|| CheckpointError::MissingTensor("meta.adam_step".into()))?;
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for id in store.ids() {
            for (prefix, out) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
                let name = format!("{prefix}{}", store.name(id));
                let t = self.get(&name).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
                if t.shape() != store.get(id).shape() {
                    return Err(CheckpointError::ShapeMismatch {
                        name,
                        expected: store.get(id).shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                out.push(t.data().to_vec());
            }
        }
        adam.restore(step, m, v).map_err(|e| CheckpointError::InvalidEntry(e.to_string()))
    }

    /// Copies every parameter of `store` from the checkpoint. Reserved
    /// entries are ignored; any other name the store lacks is rejected.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        for (name, _) in &self.tensors {
            if !is_reserved(name) && store.id(name).is_none() {
                return Err(CheckpointError::UnknownTensor(name.clone()));
            }
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self.get(&name).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if t.shape() != store.get(id).shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: store.get(id).shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            store.get_mut(id).data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u16(&mut out, name.len() as u16);
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, t.data());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader::new(buf);
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::InvalidEntry("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| CheckpointError::InvalidEntry(format!("{name}: shape overflows")))?;
            let data = r.f32_vec(numel)?;
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::InvalidEntry(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::InvalidEntry(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
