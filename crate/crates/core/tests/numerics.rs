#[macro_use]
mod common;

use common::{rand_away_from_zero, rand_input};
use mmdet_core::numerics::{
    Adam, AdamConfig, Element, GradBuffer, Graph, NumericsError, ParamStore, Session, SplitMix64, Tensor, Var,
};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn approx(a: &[f32], b: &[f32], tol: f32) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let eye = g.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
    let m = g.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
    let n = g.constant(&t(&[2, 2], &[5., 6., 7., 8.]));
    let id = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(id), &[1., 2., 3., 4.]);

    let p = g.matmul(m, n).unwrap();
    // triple loop
    let (a, b) = ([1., 2., 3., 4.], [5., 6., 7., 8.]);
    let mut want = [0f32; 4];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                want[i * 2 + j] += a[i * 2 + k] * b[k * 2 + j];
            }
        }
    }
    assert_eq!(want, [19., 22., 43., 50.]);
    assert_eq!(g.value(p), &want);

    let z = g.constant(&Tensor::zeros(&[2, 3]));
    let mut rng = SplitMix64::new(3);
    let r = g.constant(&Tensor::from_fn(&[3, 4], |_| rng.normal() as f32));
    let zr = g.matmul(z, r).unwrap();
    assert_eq!(g.shape(zr), &[2, 4]);
    assert!(g.value(zr).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_rejects_bad_inner_dims() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::zeros(&[2, 3]));
    let b = g.constant(&Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(NumericsError::ShapeMismatch { .. })));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(&t(&[3, 3], &[0., 0., 0., 1000., 1000., 0., 1., 2., 3.]));
    let y = g.softmax_rows(x).unwrap();
    let v = g.value(y);
    approx(&v[0..3], &[1. / 3.; 3], 1e-7);
    // the 1000-row has a third entry 1000 below the max which underflows to 0
    approx(&v[3..6], &[0.5, 0.5, 0.0], 1e-7);
    let e: Vec<f64> = [1f64, 2., 3.].iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    for j in 0..3 {
        assert!((v[6 + j] as f64 - e[j] / s).abs() < 1e-7);
    }
}

#[test]
fn softmax_two_large_equal_logits() {
    let mut g = Graph::new();
    let x = g.constant(&t(&[1, 2], &[1000., 1000.]));
    let y = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), scale in 0.0f64..1e4) {
        let mut rng = SplitMix64::new(seed);
        let mut g = Graph::new();
        let x = g.constant(&Tensor::from_fn(&[rows, cols], |_| rng.range_f64(-scale, scale) as f32));
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).chunks(cols) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sum {}", s);
        }
    }

    #[test]
    fn all_true_mask_is_bit_identical(s in 1usize..6, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let mut g = Graph::new();
        let mut mk = |g: &mut Graph| g.constant(&Tensor::from_fn(&[s, d], |_| rng.normal() as f32));
        let (q, k, v) = (mk(&mut g), mk(&mut g), mk(&mut g));
        let a = g.scaled_dot_attention(q, k, v, None).unwrap();
        let mask = vec![true; s * s];
        let b = g.scaled_dot_attention(q, k, v, Some(&mask)).unwrap();
        prop_assert_eq!(g.value(a), g.value(b));
    }
}

#[test]
fn attention_examples() {
    let mut rng = SplitMix64::new(11);
    let mut g = Graph::new();
    // single token: identity on V
    let q = g.constant(&Tensor::from_fn(&[1, 4], |_| rng.normal() as f32));
    let k = g.constant(&Tensor::from_fn(&[1, 4], |_| rng.normal() as f32));
    let v = g.constant(&Tensor::from_fn(&[1, 4], |_| rng.normal() as f32));
    let o = g.scaled_dot_attention(q, k, v, None).unwrap();
    assert_eq!(g.value(o), g.value(v));

    // identity mask: each query only sees its own key
    let mut mk = |g: &mut Graph| g.constant(&Tensor::from_fn(&[3, 4], |_| rng.normal() as f32));
    let (q, k, v) = (mk(&mut g), mk(&mut g), mk(&mut g));
    let eye: Vec<bool> = (0..9).map(|i| i / 3 == i % 3).collect();
    let o = g.scaled_dot_attention(q, k, v, Some(&eye)).unwrap();
    assert_eq!(g.value(o), g.value(v));
    let w = g.attention_weights(q, k, Some(&eye)).unwrap();
    for (i, &x) in g.value(w).iter().enumerate() {
        assert_eq!(x, if eye[i] { 1.0 } else { 0.0 });
    }

    // explicit loop oracle
    let o = g.scaled_dot_attention(q, k, v, None).unwrap();
    let (qv, kv, vv) = (g.value(q).to_vec(), g.value(k).to_vec(), g.value(v).to_vec());
    let mut want = vec![0f64; 12];
    for i in 0..3 {
        let mut scores = [0f64; 3];
        for j in 0..3 {
            for c in 0..4 {
                scores[j] += qv[i * 4 + c] as f64 * kv[j * 4 + c] as f64;
            }
            scores[j] /= 2.0;
        }
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..3 {
            let w = scores[j].exp() / z;
            for c in 0..4 {
                want[i * 4 + c] += w * vv[j * 4 + c] as f64;
            }
        }
    }
    for (a, b) in g.value(o).iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

#[test]
fn attention_fully_masked_row_errors() {
    let mut g = Graph::new();
    let q = g.constant(&Tensor::ones(&[2, 2]));
    let mask = [true, true, false, false];
    let err = g.scaled_dot_attention(q, q, q, Some(&mask)).unwrap_err();
    assert_eq!(err, NumericsError::AllMaskedRow { row: 1 });
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(&Tensor::ones(&[4]));
    let zeros = g.constant(&Tensor::zeros(&[4]));
    let c = g.constant(&Tensor::full(&[1, 4], 2.5));
    let y = g.layer_norm(c, ones, zeros).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let mut rng = SplitMix64::new(5);
    let x = g.constant(&Tensor::from_fn(&[2, 4], |_| rng.normal() as f32));
    let bias = g.constant(&t(&[4], &[0.1, -0.2, 0.3, 0.4]));
    let y = g.layer_norm(x, zeros, bias).unwrap();
    for row in g.value(y).chunks(4) {
        assert_eq!(row, g.value(bias));
    }

    let x = g.constant(&Tensor::from_fn(&[1, 8], |_| (rng.normal() * 3.0 + 1.0) as f32));
    let (o8, z8) = (ones8(&mut g), zeros8(&mut g));
    let y = g.layer_norm(x, o8, z8).unwrap();
    let v: Vec<f64> = g.value(y).iter().map(|&v| v as f64).collect();
    let mean = v.iter().sum::<f64>() / 8.0;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-3);
}

fn ones8(g: &mut Graph) -> Var {
    g.constant(&Tensor::ones(&[8]))
}

fn zeros8(g: &mut Graph) -> Var {
    g.constant(&Tensor::zeros(&[8]))
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(&t(&[2, 3], &[1., -2., 3., 0.5, 0., -1.]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

    let mut g = Graph::new();
    let x = g.param(&t(&[3], &[1., -2., 0.25]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2., -4., 0.5]);
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut g = Graph::new();
    let x = g.param(&t(&[2], &[1.5, -3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    let first = g.grad(x).unwrap().to_vec();
    g.backward(s).unwrap();
    let twice: Vec<f32> = first.iter().map(|v| v * 2.0).collect();
    assert_eq!(g.grad(x).unwrap(), twice.as_slice());
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), first.as_slice());
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::ones(&[2]));
    assert_eq!(g.backward(x).unwrap_err(), NumericsError::NonScalarLoss(vec![2]));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::ones(&[2]));
    let c = g.constant(&Tensor::full(&[2], 3.0));
    let d = g.detach(x);
    let y = g.mul(x, c).unwrap();
    let y = g.mul(y, d).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
    assert!(g.grad(c).is_none());
    assert!(g.grad(d).is_none());
}

fn scalar_store(x: f32) -> (ParamStore, mmdet_core::numerics::ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(x)).unwrap();
    (store, id)
}

#[test]
fn adam_zero_grad_leaves_params() {
    let (mut store, id) = scalar_store(1.25);
    let mut adam = Adam::new(&store, AdamConfig { lr: 0.1, ..Default::default() });
    let grads = GradBuffer::zeros_like(&store);
    for _ in 0..5 {
        adam.step(&mut store, &grads).unwrap();
    }
    assert_eq!(store.get(id).data(), &[1.25]);
    assert_eq!(adam.step_count(), 5);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let (mut store, id) = scalar_store(0.0);
    let mut adam = Adam::new(&store, AdamConfig { lr: 0.1, ..Default::default() });
    let mut grads = GradBuffer::zeros_like(&store);
    grads.get_mut(id)[0] = 1.0;
    adam.step(&mut store, &grads).unwrap();
    // m̂ = 1, v̂ = 1, so the update is lr / (1 + eps)
    let want = -(0.1f64 / (1.0 + 1e-8));
    assert!((store.get(id).data()[0] as f64 - want).abs() < 1e-6);
}

#[test]
fn adam_converges_on_quadratic_bowl() {
    let (mut store, id) = scalar_store(3.0);
    let mut adam = Adam::new(&store, AdamConfig { lr: 0.05, ..Default::default() });
    for _ in 0..200 {
        let mut grads = GradBuffer::zeros_like(&store);
        let mut s = Session::new(&store);
        let x = s.p(id);
        let sq = s.g.mul(x, x).unwrap();
        let loss = s.g.sum(sq);
        s.backward_into(loss, &mut grads).unwrap();
        adam.step(&mut store, &grads).unwrap();
    }
    assert!(store.get(id).data()[0].abs() < 0.1, "{}", store.get(id).data()[0]);
}

#[test]
fn adam_aborts_on_non_finite_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::ones(&[2])).unwrap();
    let b = store.add("b", Tensor::ones(&[2])).unwrap();
    let mut adam = Adam::new(&store, AdamConfig::default());
    let mut grads = GradBuffer::zeros_like(&store);
    grads.get_mut(a)[0] = 1.0;
    grads.get_mut(b)[1] = f32::NAN;
    let err = adam.step(&mut store, &grads).unwrap_err();
    assert_eq!(err, NumericsError::NonFiniteGradient("b".into()));
    assert_eq!(store.get(a).data(), &[1.0, 1.0]);
    assert_eq!(adam.step_count(), 0);
}

#[test]
fn frozen_params_are_untouched() {
    let mut store = ParamStore::new();
    let a = store.add("enc.w", Tensor::ones(&[2])).unwrap();
    let b = store.add("head.w", Tensor::ones(&[2])).unwrap();
    store.set_trainable_prefix("enc.", false);
    let mut adam = Adam::new(&store, AdamConfig { lr: 0.1, ..Default::default() });
    let mut grads = GradBuffer::zeros_like(&store);
    let mut s = Session::new(&store);
    let (va, vb) = (s.p(a), s.p(b));
    let y = s.g.mul(va, vb).unwrap();
    let loss = s.g.sum(y);
    s.backward_into(loss, &mut grads).unwrap();
    assert_eq!(grads.get(a), &[0.0, 0.0]);
    adam.step(&mut store, &grads).unwrap();
    assert_eq!(store.get(a).data(), &[1.0, 1.0]);
    assert!(store.get(b).data()[0] < 1.0);
}

// ---------------------------------------------------------------------------
// Finite-difference oracle: analytic f32 gradients against central
// differences of the same graph evaluated in f64.

const TOL: f64 = 1e-3;

fn min_row_std(x: &[f64], d: usize) -> f64 {
    x.chunks(d)
        .map(|row| {
            let m = row.iter().sum::<f64>() / d as f64;
            (row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fd_matmul(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let mut r = SplitMix64::new(seed);
        let e = grad_check!(vec![rand_input(&mut r, &[m, k]), rand_input(&mut r, &[k, n])], seed,
            |g, x| g.matmul(x[0], x[1]).unwrap());
        prop_assert!(e < TOL, "rel err {}", e);
    }

    #[test]
    fn fd_matmul_nt(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let mut r = SplitMix64::new(seed);
        let e = grad_check!(vec![rand_input(&mut r, &[m, k]), rand_input(&mut r, &[n, k])], seed,
            |g, x| g.matmul_nt(x[0], x[1]).unwrap());
        prop_assert!(e < TOL, "rel err {}", e);
    }

    #[test]
    fn fd_elementwise(r_ in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let mut r = SplitMix64::new(seed);
        let e = grad_check!(vec![rand_input(&mut r, &[r_, c]), rand_input(&mut r, &[r_, c])], seed,
            |g, x| {
                let a = g.add(x[0], x[1]).unwrap();
                let b = g.sub(a, x[1]).unwrap();
                let m = g.mul(b, x[1]).unwrap();
                let s = g.scale(m, <_ as Element>::from_f64(0.7));
                g.add_scalar(s, <_ as Element>::from_f64(0.3))
            });
        prop_assert!(e < TOL, "rel err {}", e);
    }

    #[test]
    fn fd_broadcasts(r_ in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let mut r = SplitMix64::new(seed);
        let e = grad_check!(vec![rand_input(&mut r, &[r_, c]), rand_input(&mut r, &[c]), rand_input(&mut r, &[r_])], seed,
            |g, x| {
                let a = g.add_row(x[0], x[1]).unwrap();
                g.mul_col(a, x[2]).unwrap()
            });
        prop_assert!(e < TOL, "rel err {}", e);
    }

    #[test]
    fn fd_activations(n in 1usize..17, seed in any::<u64>()) {
        let mut r = SplitMix64::new(seed);
        let e = grad_check!(vec![rand_away_from_zero(&mut r, &[n])], seed, |g, x| {
            let a = g.relu(x[0]);
            let b = g.gelu(x[0]);
            let c = g.sigmoid(x[0]);
            let d = g.sigmoid_open(x[0]);
            let ab = g.add(a, b).unwrap();
            let cd = g.mul(c, d).unwrap();
            g.add(ab, cd).unwrap()
        });
        prop_assert!(e < TOL, "rel err {}", e);
    }

    #[test]
    fn fd_softmax(r_ in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let mut r = SplitMix64::new(seed);
        let e = grad_check!(vec![rand_input(&mut r, &[r_, c])], seed, |g, x| g.softmax_rows(x[0]).unwrap());
        prop_assert!(e < TOL, "rel err {}", e);
    }

    #[test]
    fn fd_masked_attention(s in 2usize..5, d in 1usize..5, seed in any::<u64>()) {
        let mut r = SplitMix64::new(seed);
        let inputs = vec![rand_input(&mut r, &[s, d]), rand_input(&mut r, &[s, d]), rand_input(&mut r, &[s, d])];
        let e = grad_check!(inputs, seed, |g, x| {
            let s = g.shape(x[0])[0];
            // lower-triangular mask keeps every row non-empty
            let mask: Vec<bool> = (0..s * s).map(|i| i % s <= i / s).collect();
            g.scaled_dot_attention(x[0], x[1], x[2], Some(&mask)).unwrap()
        });
        prop_assert!(e < TOL, "rel err {}", e);
    }

    #[test]
    fn fd_layer_norm(r_ in 1usize..5, d in 2usize..5, seed in any::<u64>()) {
        let mut r = SplitMix64::new(seed);
        let inputs = vec![rand_input(&mut r, &[r_, d]), rand_input(&mut r, &[d]), rand_input(&mut r, &[d])];
        // Rows whose spread is comparable to h make the difference quotient
        // itself inaccurate (curvature scale is sqrt(var + eps)).
        prop_assume!(min_row_std(&inputs[0].1, d) >= 0.1);
        let e = grad_check!(inputs, seed, |g, x| g.layer_norm(x[0], x[1], x[2]).unwrap());
        prop_assert!(e < TOL, "rel err {}", e);
    }

    #[test]
    fn fd_reductions(r_ in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let mut r = SplitMix64::new(seed);
        let e = grad_check!(vec![rand_input(&mut r, &[r_, c])], seed, |g, x| {
            let a = g.mean_rows(x[0]);
            let s = g.sum(x[0]);
            let m = g.mean(x[0]);
            let sm = g.mul(s, m).unwrap();
            let t = g.tile_rows(sm, g.shape(a)[1]).unwrap();
            let sa = g.shape(a).to_vec();
            let t = g.reshape(t, &sa).unwrap();
            g.add(a, t).unwrap()
        });
        prop_assert!(e < TOL, "rel err {}", e);
    }

    #[test]
    fn fd_shape_ops(r_ in 2usize..5, c in 2usize..5, seed in any::<u64>()) {
        let mut r = SplitMix64::new(seed);
        let inputs = vec![rand_input(&mut r, &[r_, c]), rand_input(&mut r, &[r_, c])];
        let e = grad_check!(inputs, seed, |g, x| {
            let (r, c) = (g.shape(x[0])[0], g.shape(x[0])[1]);
            let t = g.transpose(x[0]).unwrap();
            let t = g.transpose(t).unwrap();
            let a = g.slice_cols(t, 1, c - 1).unwrap();
            let b = g.slice_rows(x[1], 0, r - 1).unwrap();
            let rows = g.concat_rows(&[x[0], x[1]]).unwrap();
            let rep = g.repeat_rows(b, 2).unwrap();
            let gat = g.gather_rows(rows, &[0, 2 * r - 1, 1, 0]).unwrap();
            let cc = g.concat_cols(&[a, x[1]]).unwrap();
            let f1 = g.reshape(cc, &[r * (2 * c - 1)]).unwrap();
            let f2 = g.reshape(rep, &[2 * (r - 1) * c]).unwrap();
            let f3 = g.reshape(gat, &[4 * c]).unwrap();
            let f1 = g.reshape(f1, &[r * (2 * c - 1), 1]).unwrap();
            let f2 = g.reshape(f2, &[2 * (r - 1) * c, 1]).unwrap();
            let f3 = g.reshape(f3, &[4 * c, 1]).unwrap();
            let all = g.concat_rows(&[f1, f2, f3]).unwrap();
            g.mul(all, all).unwrap()
        });
        prop_assert!(e < TOL, "rel err {}", e);
    }

    #[test]
    fn fd_conv2d(cin in 1usize..3, cout in 1usize..3, hw in 3usize..5, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>()) {
        let mut r = SplitMix64::new(seed);
        let k = 2;
        let inputs = vec![rand_input(&mut r, &[2, cin, hw, hw]), rand_input(&mut r, &[cout, cin, k, k]), rand_input(&mut r, &[cout])];
        let st = stride;
        let pd = pad;
        let e = grad_check!(inputs, (seed ^ st as u64) ^ ((pd as u64) << 8), |g, x| {
            let (stride, pad) = conv_params(g.shape(x[0])[2], g.shape(x[2])[0]);
            g.conv2d(x[0], x[1], x[2], stride, pad).unwrap()
        });
        prop_assert!(e < TOL, "rel err {}", e);
    }

    #[test]
    fn fd_conv_transpose2d(cin in 1usize..3, cout in 1usize..3, hw in 2usize..4, seed in any::<u64>()) {
        let mut r = SplitMix64::new(seed);
        let inputs = vec![rand_input(&mut r, &[2, cin, hw, hw]), rand_input(&mut r, &[cin, cout, 4, 4]), rand_input(&mut r, &[cout])];
        let e = grad_check!(inputs, seed, |g, x| g.conv_transpose2d(x[0], x[1], x[2], 2, 1).unwrap());
        prop_assert!(e < TOL, "rel err {}", e);
    }

    #[test]
    fn fd_bce_and_straight_through(seed in any::<u64>()) {
        let mut r = SplitMix64::new(seed);
        // q is a detached function of z, so the value path and the routed
        // gradient agree and finite differences see the same derivative.
        let inputs = vec![rand_input(&mut r, &[1])];
        let e1 = grad_check!(inputs.clone(), seed, |g, x| {
            let d = g.detach(x[0]);
            let q = g.add_scalar(d, <_ as Element>::from_f64(0.3));
            let st = g.straight_through(x[0], q).unwrap();
            let s = g.add(st, x[0]).unwrap();
            g.bce_with_logits(s, <_ as Element>::from_f64(1.0)).unwrap()
        });
        let e0 = grad_check!(inputs, seed, |g, x| {
            let d = g.detach(x[0]);
            let q = g.add_scalar(d, <_ as Element>::from_f64(-0.2));
            let st = g.straight_through(x[0], q).unwrap();
            let s = g.add(st, x[0]).unwrap();
            g.bce_with_logits(s, <_ as Element>::from_f64(0.0)).unwrap()
        });
        prop_assert!(e1 < TOL && e0 < TOL, "rel err {} {}", e1, e0);
    }
}

/// Geometry derived from input sizes so the generic builder stays closure-free.
fn conv_params(hw: usize, cout: usize) -> (usize, usize) {
    (1 + hw % 2, cout % 2)
}

