//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in creation order, so every node's parents have smaller
//! indices and reverse creation order is a valid reverse topological order.
//! [`Graph::backward`] walks it once and adds into the gradient buffers of
//! leaves; calling it again without [`Graph::zero_grad`] accumulates.

use super::kernels::{self, ConvGeom};
use super::{Element, NumericsError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Reshape(Var),
    Gather { src: Var, map: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    StraightThrough { z: Var },
    BceWithLogits { s: Var, target: T },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Splits a shape into `(rows, last_dim)`.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap_or(&1);
    let numel: usize = shape.iter().product();
    (numel / c.max(1), c)
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Zero-initialised gradient buffer for `v`, or None when `v` is constant.
fn slot<'a, T: Element>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

#[derive(Debug, Default)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl Graph<f32> {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Element> Graph<T> {

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf holding a copy of `t`; tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Leaf that always tracks gradients.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var, NumericsError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ----- linear algebra -------------------------------------------------

    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a), self.value(b), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `[m×k] · [n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(mismatch("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nt(m, k, n, self.value(a), self.value(b), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(mismatch("transpose", s, &[0, 0]));
        }
        let (r, c) = (s[0], s[1]);
        let map = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(a, map, &[c, r])
    }

    // ----- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `bias[c]` to every row of `a[..×c]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let (_, c) = rows_cols(self.shape(a));
        if self.value(bias).len() != c {
            return Err(mismatch("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, bias), rg))
    }

    /// Scales row `i` of `a[r×c]` by `w[i]`.
    pub fn mul_col(&mut self, a: Var, w: Var) -> Result<Var, NumericsError> {
        let (r, c) = rows_cols(self.shape(a));
        if self.value(w).len() != r {
            return Err(mismatch("mul_col", self.shape(a), self.shape(w)));
        }
        let wv = self.value(w);
        let out = self
            .value(a)
            .chunks_exact(c)
            .zip(wv)
            .flat_map(|(row, &s)| row.iter().map(move |&x| x * s))
            .collect();
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulCol(a, w), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x + s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        self.unary(a, |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()), Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Sigmoid clamped into the open interval `(0, 1)` at the resolution of
    /// `T`, so saturated inputs still yield weights strictly inside it.
    pub fn sigmoid_open(&mut self, a: Var) -> Var {
        let lo = T::min_positive_value();
        let hi = T::one() - T::epsilon() / T::from_f64(2.0);
        self.unary(a, |x| sigmoid(x).max(lo).min(hi), Op::Sigmoid(a))
    }

    // ----- normalisation --------------------------------------------------

    /// Row-wise softmax over the last dimension with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.softmax_rows_masked(a, None)
    }

    /// Row-wise softmax where `mask[i]` false gives weight exactly zero.
    /// A row without any allowed entry is an error.
    pub fn softmax_rows_masked(
        &mut self,
        a: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let (r, c) = rows_cols(self.shape(a));
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(mismatch("softmax mask", self.shape(a), &[m.len()]));
            }
        }
        let x = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let allowed = |j: usize| mask.map_or(true, |m| m[i * c + j]);
            let mut max = T::neg_infinity();
            let mut any = false;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    any = true;
                    if v > max {
                        max = v;
                    }
                }
            }
            if !any {
                return Err(NumericsError::AllMaskedRow { row: i });
            }
            let dst = &mut out[i * c..(i + 1) * c];
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - max).exp();
                    dst[j] = e;
                    sum += e;
                }
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a), rg))
    }

    /// Normalises each vector along the last dimension (ε = 1e-5), then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let (r, d) = rows_cols(self.shape(x));
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::from_f64(1e-5);
        let dt = T::from_f64(d as f64);
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); r * d];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean /= dt;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(a) {
            s += v;
        }
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(a) {
            s += v;
        }
        let n = T::from_f64(self.value(a).len() as f64);
        let rg = self.rg(a);
        self.push(vec![1], vec![s / n], Op::Mean(a), rg)
    }

    /// Mean over rows: `[r×c] -> [1×c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = rows_cols(self.shape(a));
        let mut out = vec![T::zero(); c];
        for row in self.value(a).chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rt = T::from_f64(r as f64);
        for o in &mut out {
            *o /= rt;
        }
        let rg = self.rg(a);
        self.push(vec![1, c], out, Op::MeanRows(a), rg)
    }

    /// Mean of squared differences, composed from primitives.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    // ----- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    /// `out[i] = src[map[i]]`; gradients scatter-add back through `map`.
    pub fn gather(&mut self, src: Var, map: Vec<usize>, shape: &[usize]) -> Result<Var, NumericsError> {
        let n = self.value(src).len();
        if shape.iter().product::<usize>() != map.len() || map.iter().any(|&i| i >= n) {
            return Err(mismatch("gather", self.shape(src), shape));
        }
        let sv = self.value(src);
        let out = map.iter().map(|&i| sv[i]).collect();
        let rg = self.rg(src);
        Ok(self.push(shape.to_vec(), out, Op::Gather { src, map }, rg))
    }

    /// Rows `idx` of a `[r×c]` tensor, in the given order.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let (r, c) = rows_cols(self.shape(a));
        if idx.iter().any(|&i| i >= r) {
            return Err(NumericsError::InvalidArgument(format!("row index out of range {r}")));
        }
        let map = idx.iter().flat_map(|&i| (0..c).map(move |j| i * c + j)).collect();
        self.gather(a, map, &[idx.len(), c])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, c) = rows_cols(self.shape(a));
        if start + len > c || len == 0 {
            return Err(mismatch("slice_cols", self.shape(a), &[start, len]));
        }
        let map = (0..r).flat_map(|i| (start..start + len).map(move |j| i * c + j)).collect();
        self.gather(a, map, &[r, len])
    }

    /// `[r×c] -> [times·r × c]`, the whole block repeated.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var, NumericsError> {
        let (r, c) = rows_cols(self.shape(a));
        let map = (0..times).flat_map(|_| 0..r * c).collect();
        self.gather(a, map, &[times * r, c])
    }

    /// `[r×c] -> [r·times × c]`, each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var, NumericsError> {
        let (r, c) = rows_cols(self.shape(a));
        let map = (0..r)
            .flat_map(|i| (0..times).flat_map(move |_| (0..c).map(move |j| i * c + j)))
            .collect();
        self.gather(a, map, &[r * times, c])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let c = rows_cols(self.shape(parts[0])).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = rows_cols(self.shape(p));
            if pc != c {
                return Err(mismatch("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let r = rows_cols(self.shape(parts[0])).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = rows_cols(self.shape(p));
            if pr != r {
                return Err(mismatch("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    // ----- convolutions ---------------------------------------------------

    /// `x[B×C×H×W]`, `w[Co×C×k×k]`, `b[Co]` -> `[B×Co×Ho×Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, NumericsError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
            stride,
            pad,
        };
        if !geom.valid() || self.value(b).len() != sw[0] {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let (batch, co) = (sx[0], sw[0]);
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let img = geom.channels * geom.height * geom.width;
        let mut cols = vec![T::zero(); batch * rows * p];
        let mut out = vec![T::zero(); batch * co * p];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        for n in 0..batch {
            let c = &mut cols[n * rows * p..(n + 1) * rows * p];
            kernels::im2col(&geom, &xv[n * img..(n + 1) * img], c);
            let o = &mut out[n * co * p..(n + 1) * co * p];
            for (ch, orow) in o.chunks_exact_mut(p).enumerate() {
                orow.iter_mut().for_each(|v| *v = bv[ch]);
            }
            kernels::gemm_nn(co, rows, p, wv, c, o);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let shape = vec![batch, co, geom.out_height(), geom.out_width()];
        Ok(self.push(shape, out, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Transposed convolution: `x[B×Ci×Hi×Wi]`, `w[Ci×Co×k×k]`, `b[Co]`
    /// -> `[B×Co×Ho×Wo]` with `Ho = (Hi-1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NumericsError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] {
            return Err(mismatch("conv_transpose2d", &sx, &sw));
        }
        let k = sw[2];
        let ho = ((sx[2] - 1) * stride + k).checked_sub(2 * pad);
        let wo = ((sx[3] - 1) * stride + k).checked_sub(2 * pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(mismatch("conv_transpose2d", &sx, &sw));
        };
        let geom = ConvGeom { channels: sw[1], height: ho, width: wo, kernel: k, stride, pad };
        if !geom.valid()
            || geom.out_height() != sx[2]
            || geom.out_width() != sx[3]
            || self.value(b).len() != sw[1]
        {
            return Err(mismatch("conv_transpose2d", &sx, &sw));
        }
        let (batch, ci, co) = (sx[0], sx[1], sw[1]);
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let img = co * ho * wo;
        let mut out = vec![T::zero(); batch * img];
        let mut cols = vec![T::zero(); rows * p];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        for n in 0..batch {
            cols.iter_mut().for_each(|v| *v = T::zero());
            kernels::gemm_tn(rows, ci, p, wv, &xv[n * ci * p..(n + 1) * ci * p], &mut cols);
            let o = &mut out[n * img..(n + 1) * img];
            kernels::col2im(&geom, &cols, o);
            for (ch, plane) in o.chunks_exact_mut(ho * wo).enumerate() {
                plane.iter_mut().for_each(|v| *v += bv[ch]);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![batch, co, ho, wo], out, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    // ----- special ops ----------------------------------------------------

    /// Forward value of `q`, gradient routed unchanged to `z`
    /// (straight-through estimator for vector quantisation).
    pub fn straight_through(&mut self, z: Var, q: Var) -> Result<Var, NumericsError> {
        if self.shape(z) != self.shape(q) {
            return Err(mismatch("straight_through", self.shape(z), self.shape(q)));
        }
        let value = self.value(q).to_vec();
        let rg = self.rg(z);
        Ok(self.push(self.shape(z).to_vec(), value, Op::StraightThrough { z }, rg))
    }

    /// Binary cross-entropy on a logit in the stable form
    /// `max(s,0) - s·y + ln(1 + exp(-|s|))`.
    pub fn bce_with_logits(&mut self, s: Var, target: T) -> Result<Var, NumericsError> {
        if self.value(s).len() != 1 {
            return Err(mismatch("bce_with_logits", self.shape(s), &[1]));
        }
        let x = self.value(s)[0];
        let loss = x.max(T::zero()) - x * target + (-x.abs()).exp().ln_1p();
        let rg = self.rg(s);
        Ok(self.push(vec![1], vec![loss], Op::BceWithLogits { s, target }, rg))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`; adds into leaf gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &gout, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaf_grads.push((idx, gout));
            }
        }
        for (idx, g) in leaf_grads {
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    kernels::gemm_nt(m, n, k, g, &nodes[b.0].value, ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    kernels::gemm_tn(k, m, n, &nodes[a.0].value, g, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                if let Some(ga) = slot(nodes, grads, *a) {
                    kernels::gemm_nn(m, n, k, g, &nodes[b.0].value, ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    kernels::gemm_tn(n, m, k, g, &nodes[a.0].value, gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let bv = &nodes[b.0].value;
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * v;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    let av = &nodes[a.0].value;
                    for ((x, &y), &v) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * v;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    let c = gb.len();
                    for row in g.chunks_exact(c) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::MulCol(a, w) => {
                let c = rows_cols(&nodes[a.0].shape).1;
                if let Some(ga) = slot(nodes, grads, *a) {
                    let wv = &nodes[w.0].value;
                    for ((grow, orow), &s) in ga.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(wv) {
                        grow.iter_mut().zip(orow).for_each(|(x, &y)| *x += y * s);
                    }
                }
                if let Some(gw) = slot(nodes, grads, *w) {
                    let av = &nodes[a.0].value;
                    for ((gs, orow), arow) in gw.iter_mut().zip(g.chunks_exact(c)).zip(av.chunks_exact(c)) {
                        let mut acc = T::zero();
                        for (&y, &v) in orow.iter().zip(arow) {
                            acc += y * v;
                        }
                        *gs += acc;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let av = &nodes[a.0].value;
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(av) {
                        if v > T::zero() {
                            *x += y;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let c = T::from_f64(GELU_C);
                    let k = T::from_f64(GELU_A);
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    let av = &nodes[a.0].value;
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(av) {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let d = half * (T::one() + t)
                            + half * v * (T::one() - t * t) * c * (T::one() + three * k * v * v);
                        *x += y * d;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, &y), &s) in ga.iter_mut().zip(g).zip(&node.value) {
                        *x += y * s * (T::one() - s);
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let c = rows_cols(&node.shape).1;
                    for ((grow, orow), yrow) in
                        ga.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(node.value.chunks_exact(c))
                    {
                        let mut dot = T::zero();
                        for (&dy, &y) in orow.iter().zip(yrow) {
                            dot += dy * y;
                        }
                        for ((x, &dy), &y) in grow.iter_mut().zip(orow).zip(yrow) {
                            *x += y * (dy - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = rows_cols(&node.shape).1;
                let dt = T::from_f64(d as f64);
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (orow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((a, &dy), &h) in gg.iter_mut().zip(orow).zip(hrow) {
                            *a += dy * h;
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for orow in g.chunks_exact(d) {
                        gb.iter_mut().zip(orow).for_each(|(a, &dy)| *a += dy);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let gv = &nodes[gain.0].value;
                    let mut dxhat = vec![T::zero(); d];
                    for (i, (orow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..d {
                            dxhat[j] = orow[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hrow[j];
                        }
                        mean_d /= dt;
                        mean_dh /= dt;
                        let grow = &mut gx[i * d..(i + 1) * d];
                        for j in 0..d {
                            grow[j] += rstd[i] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let s = g[0] / T::from_f64(ga.len() as f64);
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::MeanRows(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let c = g.len();
                    let r = T::from_f64((ga.len() / c) as f64);
                    for row in ga.chunks_exact_mut(c) {
                        row.iter_mut().zip(g).for_each(|(x, &y)| *x += y / r);
                    }
                }
            }
            Op::Gather { src, map } => {
                if let Some(gs) = slot(nodes, grads, *src) {
                    for (&i, &y) in map.iter().zip(g) {
                        gs[i] += y;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = slot(nodes, grads, *p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, &y)| *x += y);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = rows_cols(&node.shape).1;
                let mut col = 0;
                for p in parts {
                    let w = rows_cols(&nodes[p.0].shape).1;
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for (grow, orow) in gp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            grow.iter_mut().zip(&orow[col..col + w]).for_each(|(x, &y)| *x += y);
                        }
                    }
                    col += w;
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let batch = nodes[x.0].shape[0];
                let co = nodes[w.0].shape[0];
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.height * geom.width;
                if let Some(gw) = slot(nodes, grads, *w) {
                    for n in 0..batch {
                        let gout = &g[n * co * p..(n + 1) * co * p];
                        kernels::gemm_nt(co, p, rows, gout, &cols[n * rows * p..(n + 1) * rows * p], gw);
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for n in 0..batch {
                        for (ch, plane) in g[n * co * p..(n + 1) * co * p].chunks_exact(p).enumerate() {
                            for &v in plane {
                                gb[ch] += v;
                            }
                        }
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let wv = &nodes[w.0].value;
                    let mut dcols = vec![T::zero(); rows * p];
                    for n in 0..batch {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        kernels::gemm_tn(rows, co, p, wv, &g[n * co * p..(n + 1) * co * p], &mut dcols);
                        kernels::col2im(geom, &dcols, &mut gx[n * img..(n + 1) * img]);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (batch, ci) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.height * geom.width;
                let mut dcols = vec![T::zero(); rows * p];
                let need_w = nodes[w.0].requires_grad;
                let need_x = nodes[x.0].requires_grad;
                if let Some(gb) = slot(nodes, grads, *b) {
                    let plane = geom.height * geom.width;
                    for n in 0..batch {
                        for (ch, pl) in g[n * img..(n + 1) * img].chunks_exact(plane).enumerate() {
                            for &v in pl {
                                gb[ch] += v;
                            }
                        }
                    }
                }
                if need_w || need_x {
                    for n in 0..batch {
                        kernels::im2col(geom, &g[n * img..(n + 1) * img], &mut dcols);
                        if let Some(gw) = slot(nodes, grads, *w) {
                            kernels::gemm_nt(ci, p, rows, &nodes[x.0].value[n * ci * p..(n + 1) * ci * p], &dcols, gw);
                        }
                        if let Some(gx) = slot(nodes, grads, *x) {
                            kernels::gemm_nn(ci, rows, p, &nodes[w.0].value, &dcols, &mut gx[n * ci * p..(n + 1) * ci * p]);
                        }
                    }
                }
            }
            Op::StraightThrough { z } => {
                if let Some(gz) = slot(nodes, grads, *z) {
                    gz.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::BceWithLogits { s, target } => {
                if let Some(gs) = slot(nodes, grads, *s) {
                    let x = nodes[s.0].value[0];
                    gs[0] += g[0] * (sigmoid(x) - *target);
                }
            }
        }
    }
}
