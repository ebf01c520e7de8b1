//! Finite-difference oracle for composite models built on a `ParamStore`.
#![allow(dead_code)]

use mmdet_core::numerics::{Element, GradBuffer, Graph, ParamStore, Session, SplitMix64, Tensor, Var};

/// A model whose output can be rebuilt at any element type.
pub trait Build {
    fn build<T: Element>(&self, s: &mut Session<T>) -> Var;
}

fn weighted_loss<T: Element>(s: &mut Session<T>, out: Var, r: &[f64]) -> Var {
    let shape = s.g.shape(out).to_vec();
    let w = s.g.constant_from(&shape, r.iter().map(|&v| T::from_f64(v)).collect()).unwrap();
    let prod = s.g.mul(out, w).unwrap();
    s.g.sum(prod)
}

fn loss64(store: &ParamStore<f64>, m: &impl Build, r: &[f64]) -> f64 {
    let mut s = Session::new(store);
    let out = m.build(&mut s);
    let l = weighted_loss(&mut s, out, r);
    s.g.value(l)[0]
}

/// Global relative error `‖g_a − g_n‖ / ‖g_n‖` between f32 backward
/// gradients and f64 central differences over every trainable parameter
/// element, for the loss `Σ r ⊙ output` with random `r`.
pub fn param_grad_error(store: &ParamStore, m: &impl Build, h: f64, seed: u64) -> f64 {
    param_grad_error_sampled(store, m, h, seed, usize::MAX)
}

/// As [`param_grad_error`], probing at most `per_param` randomly chosen
/// elements of each parameter tensor.
pub fn param_grad_error_sampled(store: &ParamStore, m: &impl Build, h: f64, seed: u64, per_param: usize) -> f64 {
    let mut s = Session::new(store);
    let out = m.build(&mut s);
    let n = s.g.value(out).len();
    let mut rng = SplitMix64::new(seed);
    let r: Vec<f64> = (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect();
    let l = weighted_loss(&mut s, out, &r);
    let mut grads = GradBuffer::zeros_like(store);
    s.backward_into(l, &mut grads).unwrap();

    let mut s64 = store.cast::<f64>();
    let (mut num, mut den) = (0.0f64, 0.0f64);
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let numel = store.get(id).numel();
        let probes: Vec<usize> = if numel <= per_param {
            (0..numel).collect()
        } else {
            (0..per_param).map(|_| rng.below(numel)).collect()
        };
        for k in probes {
            let orig = s64.get(id).data()[k];
            s64.get_mut(id).data_mut()[k] = orig + h;
            let up = loss64(&s64, m, &r);
            s64.get_mut(id).data_mut()[k] = orig - h;
            let down = loss64(&s64, m, &r);
            s64.get_mut(id).data_mut()[k] = orig;
            let g_n = (up - down) / (2.0 * h);
            let g_a = grads.get(id)[k] as f64;
            num += (g_a - g_n).powi(2);
            den += g_n.powi(2);
        }
    }
    num.sqrt() / den.sqrt().max(1e-12)
}

// ---------------------------------------------------------------------------
// Per-operation oracle: analytic f32 gradients against central differences
// of the same graph evaluated in f64.

pub fn leaf<T: Element>(g: &mut Graph<T>, shape: &[usize], data: &[f64]) -> Var {
    g.param(&Tensor::new(shape, data.iter().map(|&v| T::from_f64(v)).collect()).unwrap())
}

pub fn konst<T: Element>(g: &mut Graph<T>, shape: &[usize], data: &[f64]) -> Var {
    g.constant(&Tensor::new(shape, data.iter().map(|&v| T::from_f64(v)).collect()).unwrap())
}

/// `loss = Σ out ⊙ r` for fixed weights `r`, so every output element matters.
pub fn weighted_sum<T: Element>(g: &mut Graph<T>, out: Var, seed: u64) -> Var {
    let mut rng = SplitMix64::derived(seed, 99);
    let n = g.value(out).len();
    let shape = g.shape(out).to_vec();
    let r: Vec<f64> = (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect();
    let rv = konst(g, &shape, &r);
    let p = g.mul(out, rv).unwrap();
    g.sum(p)
}

/// Relative error of f32 analytic input gradients against f64 central
/// differences of the same graph. The body is written once and
/// instantiated for both element types.
#[allow(unused_macros)]
macro_rules! grad_check {
    ($inputs:expr, $seed:expr, |$g:ident, $x:ident| $body:expr) => {{
        let inputs: Vec<(Vec<usize>, Vec<f64>)> = $inputs;
        let seed: u64 = $seed;
        fn build32($g: &mut mmdet_core::numerics::Graph<f32>, $x: &[mmdet_core::numerics::Var]) -> mmdet_core::numerics::Var {
            $body
        }
        fn build64($g: &mut mmdet_core::numerics::Graph<f64>, $x: &[mmdet_core::numerics::Var]) -> mmdet_core::numerics::Var {
            $body
        }
        let eval64 = |vals: &[(Vec<usize>, Vec<f64>)]| -> f64 {
            let mut g = mmdet_core::numerics::Graph::<f64>::default();
            let xs: Vec<mmdet_core::numerics::Var> = vals.iter().map(|(s, d)| crate::common::leaf(&mut g, s, d)).collect();
            let out = build64(&mut g, &xs);
            let l = crate::common::weighted_sum(&mut g, out, seed);
            g.value(l)[0]
        };
        let mut g = mmdet_core::numerics::Graph::<f32>::new();
        let xs: Vec<mmdet_core::numerics::Var> = inputs.iter().map(|(s, d)| crate::common::leaf(&mut g, s, d)).collect();
        let out = build32(&mut g, &xs);
        let l = crate::common::weighted_sum(&mut g, out, seed);
        g.backward(l).unwrap();
        let h = 1e-3;
        // relative error of the full gradient vector over all inputs
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for (i, (_, data)) in inputs.iter().enumerate() {
            let analytic: Vec<f64> = match g.grad(xs[i]) {
                Some(gr) => gr.iter().map(|&v| v as f64).collect(),
                None => vec![0.0; data.len()],
            };
            for j in 0..data.len() {
                let mut plus = inputs.clone();
                plus[i].1[j] += h;
                let mut minus = inputs.clone();
                minus[i].1[j] -= h;
                let numeric = (eval64(&plus) - eval64(&minus)) / (2.0 * h);
                diff += (analytic[j] - numeric).powi(2);
                na += analytic[j].powi(2);
                nn += numeric.powi(2);
            }
        }
        let denom = na.sqrt().max(nn.sqrt());
        if denom < 1e-8 { 0.0 } else { diff.sqrt() / denom }
    }};
}

pub fn rand_input(rng: &mut SplitMix64, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let n: usize = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| rng.range_f64(-1.5, 1.5)).collect())
}

/// Inputs kept away from the ReLU kink so the difference quotient is smooth.
pub fn rand_away_from_zero(rng: &mut SplitMix64, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let (s, d) = rand_input(rng, shape);
    (s, d.into_iter().map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v }).collect())
}
