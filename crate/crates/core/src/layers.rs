//! Parameterised building blocks shared by the models.

use crate::numerics::{Element, NumericsError, ParamId, ParamStore, Session, SplitMix64, Tensor, Var};

/// Normal initialisation with standard deviation `std`.
pub fn init_normal(rng: &mut SplitMix64, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| (rng.normal() * std) as f32)
}

/// Affine map `x·W + b` applied to each row, `W` stored `[in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self, NumericsError> {
        let w = store.add(format!("{name}.w"), init_normal(rng, &[in_dim, out_dim], (1.0 / in_dim as f64).sqrt()))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        let y = s.g.matmul(x, w)?;
        s.g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, NumericsError> {
        let gain = store.add(format!("{name}.gain"), Tensor::ones(&[dim]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        let (g, b) = (s.p(self.gain), s.p(self.bias));
        s.g.layer_norm(x, g, b)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        let h = self.fc1.forward(s, x)?;
        let h = s.g.gelu(h);
        self.fc2.forward(s, h)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self, NumericsError> {
        if heads == 0 || dim % heads != 0 {
            return Err(NumericsError::InvalidArgument(format!("{dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        4 * Linear::param_count(dim, dim)
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, xq: Var, xkv: Var, mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        Ok(self.forward_with_weights(s, xq, xkv, mask)?.0)
    }

    /// Output together with the per-head weight matrices.
    pub fn forward_with_weights<T: Element>(
        &self,
        s: &mut Session<T>,
        xq: Var,
        xkv: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>), NumericsError> {
        let q = self.q.forward(s, xq)?;
        let k = self.k.forward(s, xkv)?;
        let v = self.v.forward(s, xkv)?;
        let hd = self.dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (s.g.slice_cols(q, h * hd, hd)?, s.g.slice_cols(k, h * hd, hd)?, s.g.slice_cols(v, h * hd, hd)?)
            };
            let w = s.g.attention_weights(qh, kh, mask)?;
            outs.push(s.g.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = if self.heads == 1 { outs[0] } else { s.g.concat_cols(&outs)? };
        Ok((self.o.forward(s, cat)?, weights))
    }
}

/// 2-D convolution over `[B×C×H×W]` inputs, weights `[out×in×k×k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self, NumericsError> {
        let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
        let w = store.add(format!("{name}.w"), init_normal(rng, &[cout, cin, kernel, kernel], std))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?;
        Ok(Self { w, b, stride, pad })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed convolution, weights `[in×out×k×k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self, NumericsError> {
        // each output pixel sees about cin·(k/stride)² inputs
        let fan = (cin * kernel * kernel / (stride * stride)).max(1);
        let w = store.add(format!("{name}.w"), init_normal(rng, &[cin, cout, kernel, kernel], (2.0 / fan as f64).sqrt()))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?;
        Ok(Self { w, b, stride, pad })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NumericsError> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.g.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}
