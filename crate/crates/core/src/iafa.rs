//! Spatio-temporal transformer over `(x, x̂)` frame pairs.
//!
//! Each layer runs a joint attention over the patch tokens of all frames,
//! then lets every frame-centric token attend its own frame's patch tokens.
//! The stacked frame-centric tokens form the branch output, one row per frame.

use crate::layers::{init_normal, Conv2d, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::numerics::{Element, NumericsError, ParamId, ParamStore, Session, SplitMix64, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    /// Patches of the raw 2C-channel input projected directly.
    LinearPatch,
    /// 3×3 convolution with GELU before patch projection.
    ConvStem,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Joint across-frame attention followed by in-frame aggregation.
    Iafa,
    /// Per-frame class token attending only within its frame, no
    /// across-frame stage.
    BaseVit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IafaConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub patch: usize,
    pub frame_size: usize,
    pub n_max: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub mlp_ratio: usize,
    pub backbone: Backbone,
    pub mode: AttentionMode,
}

impl Default for IafaConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            layers: 4,
            patch: 8,
            frame_size: 32,
            n_max: 16,
            in_channels: 3,
            stem_channels: 8,
            mlp_ratio: 2,
            backbone: Backbone::ConvStem,
            mode: AttentionMode::Iafa,
        }
    }
}

impl IafaConfig {
    pub fn patches_per_frame(&self) -> usize {
        (self.frame_size / self.patch).pow(2)
    }

    fn patch_in(&self) -> usize {
        let ch = match self.backbone {
            Backbone::ConvStem => self.stem_channels,
            Backbone::LinearPatch => 2 * self.in_channels,
        };
        ch * self.patch * self.patch
    }

    fn blocks_per_layer(&self) -> usize {
        match self.mode {
            AttentionMode::Iafa => 2,
            AttentionMode::BaseVit => 1,
        }
    }

    /// `stem + (P_in + 1)·D + (L + N_max + 1)·D + layers·B·((4 + 2r)·D² + (9 + r)·D) + 2D`,
    /// where `stem = 18·C·s + s` for the conv stem with `s` output channels
    /// (0 otherwise), `P_in` is the flattened patch width, `B` the blocks per
    /// layer and `r` the MLP ratio.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let hidden = self.mlp_ratio * d;
        let stem = match self.backbone {
            Backbone::ConvStem => 2 * self.in_channels * self.stem_channels * 9 + self.stem_channels,
            Backbone::LinearPatch => 0,
        };
        let proj = self.patch_in() * d + d;
        let embeddings = self.patches_per_frame() * d + self.n_max * d + d;
        // two layer norms, four D×D projections, the MLP
        let block = 2 * (2 * d) + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d);
        let final_norm = 2 * d;
        stem + proj + embeddings + self.layers * self.blocks_per_layer() * block + final_norm
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        let bad = |m: String| Err(NumericsError::InvalidArgument(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.patch == 0 || self.frame_size % self.patch != 0 {
            return bad(format!("frame {} not divisible by patch {}", self.frame_size, self.patch));
        }
        if self.n_max == 0 || self.layers == 0 {
            return bad("n_max and layers must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &IafaConfig, rng: &mut SplitMix64) -> Result<Self, NumericsError> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.dim, cfg.heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), cfg.dim, cfg.mlp_ratio * cfg.dim, rng)?,
        })
    }

    fn mlp_residual<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        let h = self.ln2.forward(s, x)?;
        let h = self.mlp.forward(s, h)?;
        s.g.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    across: Option<Block>,
    inner: Block,
}

/// Attention output before the residual add, with per-head weights.
pub struct AttentionTrace {
    pub out: Var,
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Iafa {
    pub cfg: IafaConfig,
    stem: Option<Conv2d>,
    proj: Linear,
    pub spatial: ParamId,
    pub temporal: ParamId,
    pub fc_seed: ParamId,
    layers: Vec<Layer>,
    final_norm: LayerNorm,
}

/// In-frame mask over keys `[FC (N); P (N·L)]`: frame-centric token `i`
/// sees itself and the patch tokens of frame `i`.
pub fn in_frame_mask(n: usize, l: usize) -> Vec<bool> {
    let cols = n + n * l;
    let mut m = vec![false; n * cols];
    for i in 0..n {
        m[i * cols + i] = true;
        for j in 0..l {
            m[i * cols + n + i * l + j] = true;
        }
    }
    m
}

/// Block-diagonal mask over `[CLS (N); P (N·L)]` for the per-frame baseline.
fn frame_block_mask(n: usize, l: usize) -> Vec<bool> {
    let t = n + n * l;
    let frame = |r: usize| if r < n { r } else { (r - n) / l };
    let mut m = vec![false; t * t];
    for r in 0..t {
        for c in 0..t {
            m[r * t + c] = frame(r) == frame(c);
        }
    }
    m
}

/// Gain of the residual-difference filters the conv stem starts with.
pub const RESIDUAL_GAIN: f32 = 10.0;

/// Turns the first `2C` stem filters into centre-tap `±g·(x − x̂)` detectors,
/// one pair per colour channel, so the GELU that follows responds to the
/// residual magnitude from the first step.
fn residual_init(w: &mut Tensor, c: usize, gain: f32) {
    let sh = w.shape().to_vec();
    let (cout, cin, k) = (sh[0], sh[1], sh[2]);
    let per_out = cin * k * k;
    let centre = (k / 2) * k + k / 2;
    let data = w.data_mut();
    for o in 0..cout.min(2 * c) {
        let (ch, sign) = (o / 2, if o % 2 == 0 { 1.0 } else { -1.0 });
        let filt = &mut data[o * per_out..(o + 1) * per_out];
        filt.iter_mut().for_each(|v| *v = 0.0);
        filt[ch * k * k + centre] = sign * gain;
        filt[(c + ch) * k * k + centre] = -sign * gain;
    }
}

impl Iafa {
    pub fn new(store: &mut ParamStore, name: &str, cfg: IafaConfig, rng: &mut SplitMix64) -> Result<Self, NumericsError> {
        cfg.validate()?;
        let d = cfg.dim;
        let stem = match cfg.backbone {
            Backbone::ConvStem => {
                let stem = Conv2d::new(store, &format!("{name}.stem"), 2 * cfg.in_channels, cfg.stem_channels, 3, 1, 1, rng)?;
                residual_init(store.get_mut(stem.w), cfg.in_channels, RESIDUAL_GAIN);
                Some(stem)
            }
            Backbone::LinearPatch => None,
        };
        let proj = Linear::new(store, &format!("{name}.patch_proj"), cfg.patch_in(), d, rng)?;
        let spatial = store.add(format!("{name}.spatial"), init_normal(rng, &[cfg.patches_per_frame(), d], 0.02))?;
        let temporal = store.add(format!("{name}.temporal"), init_normal(rng, &[cfg.n_max, d], 0.02))?;
        let fc_seed = store.add(format!("{name}.fc_seed"), init_normal(rng, &[1, d], 0.02))?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let across = match cfg.mode {
                AttentionMode::Iafa => Some(Block::new(store, &format!("{name}.l{i}.across"), &cfg, rng)?),
                AttentionMode::BaseVit => None,
            };
            let inner = Block::new(store, &format!("{name}.l{i}.inframe"), &cfg, rng)?;
            layers.push(Layer { across, inner });
        }
        let final_norm = LayerNorm::new(store, &format!("{name}.final_ln"), d)?;
        Ok(Self { cfg, stem, proj, spatial, temporal, fc_seed, layers, final_norm })
    }

    /// Channel-concatenates `x` and `x̂` (`[N×C×H×W]` each), applies the stem
    /// and projects each `p×p` patch to width D: `[N·L × D]`.
    ///
    /// With the conv stem each token sees its own patch plus a one-pixel
    /// border, so a change inside one patch reaches at most that token and
    /// its eight neighbours.
    pub fn tokenize<T: Element>(&self, s: &mut Session<T>, x: &Tensor, xhat: &Tensor) -> Result<Var, NumericsError> {
        if x.shape() != xhat.shape() || x.rank() != 4 {
            return Err(NumericsError::ShapeMismatch { op: "tokenize", lhs: x.shape().to_vec(), rhs: xhat.shape().to_vec() });
        }
        let sh = x.shape();
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        if c != self.cfg.in_channels || h != self.cfg.frame_size || w != self.cfg.frame_size {
            return Err(NumericsError::ShapeMismatch { op: "tokenize", lhs: sh.to_vec(), rhs: vec![self.cfg.frame_size] });
        }
        let plane = c * h * w;
        let mut data = Vec::with_capacity(2 * n * plane);
        for f in 0..n {
            data.extend(x.data()[f * plane..(f + 1) * plane].iter().map(|&v| T::from_f64(v as f64)));
            data.extend(xhat.data()[f * plane..(f + 1) * plane].iter().map(|&v| T::from_f64(v as f64)));
        }
        let input = s.g.constant_from(&[n, 2 * c, h, w], data)?;
        let feat = match &self.stem {
            Some(stem) => {
                let y = stem.forward(s, input)?;
                s.g.gelu(y)
            }
            None => input,
        };
        let patches = s.g.patchify(feat, self.cfg.patch)?;
        self.proj.forward(s, patches)
    }

    /// Adds spatial embedding `j` and temporal embedding `i` to patch token
    /// `(i, j)`, and temporal embedding `i` to frame-centric token `i`.
    pub fn add_embeddings<T: Element>(&self, s: &mut Session<T>, p: Var, fc: Var, n: usize) -> Result<(Var, Var), NumericsError> {
        if n > self.cfg.n_max {
            return Err(NumericsError::InvalidArgument(format!(
                "clip of {n} frames is longer than n_max {}",
                self.cfg.n_max
            )));
        }
        let sp = s.p(self.spatial);
        let tp = s.p(self.temporal);
        let t = s.g.slice_rows(tp, 0, n)?;
        let sp_all = s.g.tile_rows(sp, n)?;
        let t_all = s.g.repeat_rows(t, self.cfg.patches_per_frame())?;
        let p = s.g.add(p, sp_all)?;
        let p = s.g.add(p, t_all)?;
        let fc = s.g.add(fc, t)?;
        Ok((p, fc))
    }

    /// One frame-centric token per frame, all copies of the learned seed.
    pub fn init_fc<T: Element>(&self, s: &mut Session<T>, n: usize) -> Result<Var, NumericsError> {
        let seed = s.p(self.fc_seed);
        s.g.tile_rows(seed, n)
    }

    /// Joint attention over all `N·L` patch tokens (pre-norm), before the
    /// residual add.
    pub fn across_frame_attention<T: Element>(&self, s: &mut Session<T>, layer: usize, p: Var) -> Result<AttentionTrace, NumericsError> {
        let b = self.layers[layer]
            .across
            .as_ref()
            .ok_or_else(|| NumericsError::InvalidArgument("baseline mode has no across-frame stage".into()))?;
        let h = b.ln1.forward(s, p)?;
        let (out, weights) = b.attn.forward_with_weights(s, h, h, None)?;
        Ok(AttentionTrace { out, weights })
    }

    /// Full across-frame block: attention and MLP, each with a residual.
    pub fn across_frame<T: Element>(&self, s: &mut Session<T>, layer: usize, p: Var) -> Result<Var, NumericsError> {
        let a = self.across_frame_attention(s, layer, p)?;
        let p = s.g.add(p, a.out)?;
        self.layers[layer].across.as_ref().unwrap().mlp_residual(s, p)
    }

    /// Frame-centric token `i` attends `{fc_i} ∪ patches of frame i`;
    /// patch tokens are read, never written. Output is before the residual.
    pub fn in_frame_attention<T: Element>(&self, s: &mut Session<T>, layer: usize, fc: Var, p: Var) -> Result<AttentionTrace, NumericsError> {
        let n = s.g.shape(fc)[0];
        let l = s.g.shape(p)[0] / n;
        let b = &self.layers[layer].inner;
        let kv_in = s.g.concat_rows(&[fc, p])?;
        let kv = b.ln1.forward(s, kv_in)?;
        let q = s.g.slice_rows(kv, 0, n)?;
        let mask = in_frame_mask(n, l);
        let (out, weights) = b.attn.forward_with_weights(s, q, kv, Some(&mask))?;
        Ok(AttentionTrace { out, weights })
    }

    pub fn in_frame<T: Element>(&self, s: &mut Session<T>, layer: usize, fc: Var, p: Var) -> Result<Var, NumericsError> {
        let a = self.in_frame_attention(s, layer, fc, p)?;
        let fc = s.g.add(fc, a.out)?;
        self.layers[layer].inner.mlp_residual(s, fc)
    }

    fn base_layer<T: Element>(&self, s: &mut Session<T>, layer: usize, tokens: Var, mask: &[bool]) -> Result<Var, NumericsError> {
        let b = &self.layers[layer].inner;
        let h = b.ln1.forward(s, tokens)?;
        let a = b.attn.forward(s, h, h, Some(mask))?;
        let t = s.g.add(tokens, a)?;
        b.mlp_residual(s, t)
    }

    /// Branch output `[N×D]` for a clip and its reconstruction.
    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: &Tensor, xhat: &Tensor) -> Result<Var, NumericsError> {
        let n = x.shape()[0];
        let l = self.cfg.patches_per_frame();
        let p = self.tokenize(s, x, xhat)?;
        let fc = self.init_fc(s, n)?;
        let (mut p, mut fc) = self.add_embeddings(s, p, fc, n)?;
        match self.cfg.mode {
            AttentionMode::Iafa => {
                for i in 0..self.layers.len() {
                    p = self.across_frame(s, i, p)?;
                    fc = self.in_frame(s, i, fc, p)?;
                }
            }
            AttentionMode::BaseVit => {
                let mask = frame_block_mask(n, l);
                let mut tokens = s.g.concat_rows(&[fc, p])?;
                for i in 0..self.layers.len() {
                    tokens = self.base_layer(s, i, tokens, &mask)?;
                }
                fc = s.g.slice_rows(tokens, 0, n)?;
            }
        }
        self.final_norm.forward(s, fc)
    }
}
