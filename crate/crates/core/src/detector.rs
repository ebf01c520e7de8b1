//! Full detector: spatio-temporal branch, multi-modal branch and fusion
//! head, with each component switchable for ablations.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::fusion::{FusionError, FusionHead};
use crate::iafa::{AttentionMode, Backbone, Iafa, IafaConfig};
use crate::kv::{KvError, KvMap};
use crate::mmfr::{MmfrError, MmfrProjector, MmfrRecord};
use crate::numerics::{Element, NumericsError, ParamStore, Session, SplitMix64, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid module combination: {0}")]
    InvalidCombination(String),
    #[error("config: {0}")]
    Config(String),
    #[error("clip has no feature record but the multi-modal branch is enabled")]
    MissingRecord,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Mmfr(#[from] MmfrError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<KvError> for ModelError {
    fn from(e: KvError) -> Self {
        ModelError::Config(e.to_string())
    }
}

/// Ablation switches.
///
/// The spatio-temporal branch is present unless `mmfr` is the only flag.
/// Without `recon` the branch sees the frames twice instead of the
/// frames and their reconstruction. Without `iafa` it runs the per-frame
/// class-token baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Variant {
    pub recon: bool,
    pub iafa: bool,
    pub mmfr: bool,
    pub fusion: bool,
}

pub const FLAG_NAMES: [&str; 4] = ["recon", "iafa", "mmfr", "fusion"];

impl Variant {
    pub const FULL: Variant = Variant { recon: true, iafa: true, mmfr: true, fusion: true };

    pub fn new(recon: bool, iafa: bool, mmfr: bool, fusion: bool) -> Result<Self, ModelError> {
        let v = Self { recon, iafa, mmfr, fusion };
        v.validate()?;
        Ok(v)
    }

    /// Comma-separated subset of `recon,iafa,mmfr,fusion`; empty selects the
    /// baseline.
    pub fn parse(flags: &str) -> Result<Self, ModelError> {
        let mut v = Self::default();
        for f in flags.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            let slot = match f {
                "recon" => &mut v.recon,
                "iafa" => &mut v.iafa,
                "mmfr" => &mut v.mmfr,
                "fusion" => &mut v.fusion,
                _ => return Err(ModelError::InvalidCombination(format!("unknown flag {f:?}"))),
            };
            if *slot {
                return Err(ModelError::InvalidCombination(format!("flag {f} given twice")));
            }
            *slot = true;
        }
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.fusion && !self.mmfr {
            return Err(ModelError::InvalidCombination("fusion requires mmfr".into()));
        }
        Ok(())
    }

    pub fn has_st(&self) -> bool {
        self.recon || self.iafa || !self.mmfr
    }

    pub fn flags(&self) -> String {
        let on = [self.recon, self.iafa, self.mmfr, self.fusion];
        FLAG_NAMES.iter().zip(on).filter(|(_, b)| *b).map(|(n, _)| *n).collect::<Vec<_>>().join(",")
    }

    /// Row name in the ablation table.
    pub fn row_name(&self) -> String {
        match (self.recon, self.iafa, self.mmfr, self.fusion) {
            (false, false, false, false) => "base-vit".into(),
            (true, false, false, false) => "+rec".into(),
            (true, true, false, false) => "+iafa".into(),
            (false, false, true, false) => "mmfr-only".into(),
            (true, true, true, false) => "+mmfr".into(),
            (true, true, true, true) => "+fus".into(),
            _ => self.flags(),
        }
    }

    /// The ablation rows in table order.
    pub fn table_rows() -> Vec<Variant> {
        ["", "recon", "recon,iafa", "mmfr", "recon,iafa,mmfr", "recon,iafa,mmfr,fusion"]
            .iter()
            .map(|f| Variant::parse(f).expect("valid row"))
            .collect()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.row_name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub iafa: IafaConfig,
    pub gate_hidden: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { iafa: IafaConfig::default(), gate_hidden: 32, variant: Variant::FULL, seed: 0 }
    }
}

pub const CONFIG_KEYS: [&str; 13] = [
    "dim",
    "heads",
    "layers",
    "patch",
    "frame_size",
    "n_max",
    "in_channels",
    "stem_channels",
    "mlp_ratio",
    "backbone",
    "gate_hidden",
    "flags",
    "model_seed",
];

impl DetectorConfig {
    pub fn to_kv(&self) -> KvMap {
        let c = &self.iafa;
        let mut kv = KvMap::default();
        kv.set("dim", c.dim);
        kv.set("heads", c.heads);
        kv.set("layers", c.layers);
        kv.set("patch", c.patch);
        kv.set("frame_size", c.frame_size);
        kv.set("n_max", c.n_max);
        kv.set("in_channels", c.in_channels);
        kv.set("stem_channels", c.stem_channels);
        kv.set("mlp_ratio", c.mlp_ratio);
        kv.set(
            "backbone",
            match c.backbone {
                Backbone::ConvStem => "conv",
                Backbone::LinearPatch => "linear",
            },
        );
        kv.set("gate_hidden", self.gate_hidden);
        kv.set("flags", self.variant.flags());
        kv.set("model_seed", self.seed);
        kv
    }

    /// Reads the model keys of `kv`; absent keys keep their defaults and
    /// other keys are ignored.
    pub fn from_kv(kv: &KvMap) -> Result<Self, ModelError> {
        let d = Self::default();
        let di = &d.iafa;
        let backbone = match kv.get_str("backbone").unwrap_or("conv") {
            "conv" => Backbone::ConvStem,
            "linear" => Backbone::LinearPatch,
            other => return Err(ModelError::Config(format!("backbone must be conv or linear, got {other:?}"))),
        };
        let variant = match kv.get_str("flags") {
            Some(f) => Variant::parse(f)?,
            None => d.variant,
        };
        let iafa = IafaConfig {
            dim: kv.get_or("dim", di.dim)?,
            heads: kv.get_or("heads", di.heads)?,
            layers: kv.get_or("layers", di.layers)?,
            patch: kv.get_or("patch", di.patch)?,
            frame_size: kv.get_or("frame_size", di.frame_size)?,
            n_max: kv.get_or("n_max", di.n_max)?,
            in_channels: kv.get_or("in_channels", di.in_channels)?,
            stem_channels: kv.get_or("stem_channels", di.stem_channels)?,
            mlp_ratio: kv.get_or("mlp_ratio", di.mlp_ratio)?,
            backbone,
            mode: if variant.iafa { AttentionMode::Iafa } else { AttentionMode::BaseVit },
        };
        Ok(Self { iafa, gate_hidden: kv.get_or("gate_hidden", d.gate_hidden)?, variant, seed: kv.get_or("model_seed", d.seed)? })
    }
}

/// One clip as the detector consumes it.
pub struct ClipInput<'a> {
    /// `[N×C×H×W]`
    pub frames: &'a Tensor,
    /// VQ-VAE reconstruction of `frames`, same shape.
    pub recon: &'a Tensor,
    pub record: Option<&'a MmfrRecord>,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub store: ParamStore,
    pub st: Option<Iafa>,
    pub projector: Option<MmfrProjector>,
    pub head: FusionHead,
}

impl Detector {
    pub fn new(mut cfg: DetectorConfig) -> Result<Self, ModelError> {
        cfg.variant.validate()?;
        cfg.iafa.mode = if cfg.variant.iafa { AttentionMode::Iafa } else { AttentionMode::BaseVit };
        let mut rng = SplitMix64::derived(cfg.seed, 0xDE7E_C70F);
        let mut store = ParamStore::new();
        let st = if cfg.variant.has_st() { Some(Iafa::new(&mut store, "st", cfg.iafa.clone(), &mut rng)?) } else { None };
        let projector =
            if cfg.variant.mmfr { Some(MmfrProjector::new(&mut store, "mmfr", cfg.iafa.dim, &mut rng)?) } else { None };
        let head = FusionHead::new(&mut store, "fusion", cfg.iafa.dim, cfg.gate_hidden, &mut rng)?;
        Ok(Self { cfg, store, st, projector, head })
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    /// Logit `[1×1]` for one clip.
    pub fn forward<T: Element>(&self, s: &mut Session<T>, input: &ClipInput) -> Result<Var, ModelError> {
        let f_st = match &self.st {
            Some(st) => {
                let xhat = if self.cfg.variant.recon { input.recon } else { input.frames };
                Some(st.forward(s, input.frames, xhat)?)
            }
            None => None,
        };
        let f_m = match &self.projector {
            Some(p) => Some(p.project_and_concat(s, input.record.ok_or(ModelError::MissingRecord)?)?),
            None => None,
        };
        match (f_st, f_m) {
            (Some(a), Some(b)) if self.cfg.variant.fusion => Ok(self.head.forward(s, a, b)?),
            (Some(a), Some(b)) => {
                let f0 = s.g.concat_rows(&[a, b])?;
                Ok(self.head.predict(s, f0)?)
            }
            (Some(f), None) | (None, Some(f)) => Ok(self.head.predict(s, f)?),
            (None, None) => unreachable!("variant always enables a branch"),
        }
    }

    /// Logit without recording gradients.
    pub fn logit(&self, input: &ClipInput) -> Result<f32, ModelError> {
        let mut s = Session::new(&self.store);
        let out = self.forward(&mut s, input)?;
        Ok(s.g.value(out)[0])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store);
        ck.set_text("kind", "detector");
        ck.set_text("config", &self.cfg.to_kv().to_text());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        if ck.text("kind").as_deref() != Some("detector") {
            return Err(ModelError::Config("checkpoint does not hold a detector".into()));
        }
        let text = ck.text("config").ok_or_else(|| CheckpointError::MissingTensor("meta.config".into()))?;
        let mut m = Self::new(DetectorConfig::from_kv(&KvMap::parse(&text)?)?)?;
        ck.apply_to(&mut m.store)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
