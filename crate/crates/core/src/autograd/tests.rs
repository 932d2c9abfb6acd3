use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check, DEFAULT_STEP};

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Contract an op's output with a fixed random tensor so every output element matters.
fn project<'g>(v: Var<'g>, seed: u64) -> Var<'g> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&v.shape(), &mut rng);
    (v * v.graph().constant(w)).sum()
}

fn assert_grad<F>(inputs: Vec<Tensor>, probe: &[usize], f: F)
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let report = check(&inputs, probe, 24, DEFAULT_STEP, &mut rng, |g, v| project(f(g, v), 99));
    assert!(report.max_rel_err() < 1e-6, "worst probe {:?}", report.worst());
}

#[test]
fn binary_ops_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4], &mut rng).map(|v| v + 2.0);
    assert_grad(vec![a.clone(), b.clone()], &[0, 1], |_, v| v[0] + v[1]);
    assert_grad(vec![a.clone(), b.clone()], &[0, 1], |_, v| v[0] - v[1]);
    assert_grad(vec![a.clone(), b.clone()], &[0, 1], |_, v| v[0] * v[1]);
    assert_grad(vec![a, b], &[0, 1], |_, v| v[0] / v[1]);
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[5, 3], &mut rng);
    let pos = x.map(|v| v.abs() + 0.5);
    assert_grad(vec![x.clone()], &[0], |_, v| v[0].exp());
    assert_grad(vec![x.clone()], &[0], |_, v| v[0].sigmoid());
    assert_grad(vec![x.clone()], &[0], |_, v| v[0].gelu());
    assert_grad(vec![x.clone()], &[0], |_, v| v[0].elu());
    assert_grad(vec![x.clone()], &[0], |_, v| v[0].square());
    assert_grad(vec![pos.clone()], &[0], |_, v| v[0].ln());
    assert_grad(vec![pos.clone()], &[0], |_, v| v[0].sqrt());
    assert_grad(vec![pos.clone()], &[0], |_, v| v[0].recip());
    assert_grad(vec![pos], &[0], |_, v| v[0].powf(1.7));
}

#[test]
fn reductions_and_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 3, 4], &mut rng);
    assert_grad(vec![x.clone()], &[0], |_, v| v[0].sum_axis(1, true));
    assert_grad(vec![x.clone()], &[0], |_, v| v[0].mean_axis(2, false));
    assert_grad(vec![x.clone()], &[0], |_, v| v[0].permute(&[2, 0, 1]));
    assert_grad(vec![x.clone()], &[0], |_, v| v[0].narrow(1, 1, 2));
    assert_grad(vec![x.clone()], &[0], |_, v| v[0].reshape(&[6, 4]).softmax_last());
    assert_grad(vec![x.clone(), x], &[0, 1], |_, v| Var::concat(&[v[0], v[1]], 2));
}

#[test]
fn matmul_linear_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&[2, 3, 4], &mut rng);
    let b = rand_tensor(&[2, 4, 5], &mut rng);
    assert_grad(vec![a.clone(), b], &[0, 1], |_, v| v[0].bmm(v[1]));
    let w = rand_tensor(&[6, 4], &mut rng);
    let bias = rand_tensor(&[6], &mut rng);
    assert_grad(vec![a.clone(), w, bias], &[0, 1, 2], |_, v| v[0].linear(v[1], Some(v[2])));
    let gamma = rand_tensor(&[4], &mut rng);
    let beta = rand_tensor(&[4], &mut rng);
    assert_grad(vec![a, gamma, beta], &[0, 1, 2], |_, v| v[0].layer_norm(v[1], v[2], 1e-5));
}

#[test]
fn conv_and_resampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[2, 3, 7, 6], &mut rng);
    let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    assert_grad(vec![x.clone(), w.clone(), b.clone()], &[0, 1, 2], |_, v| v[0].conv2d(v[1], Some(v[2]), 1, 1));
    assert_grad(vec![x.clone(), w, b], &[0, 1, 2], |_, v| v[0].conv2d(v[1], Some(v[2]), 2, 1));
    assert_grad(vec![x.clone()], &[0], |_, v| v[0].avg_pool2());
    assert_grad(vec![x.clone()], &[0], |_, v| v[0].upsample_nearest(2));
    assert_grad(vec![x.clone()], &[0], |_, v| v[0].resize_bilinear(14, 12));
    assert_grad(vec![x.clone()], &[0], |_, v| v[0].resize_bilinear(3, 5));
    assert_grad(vec![x], &[0], |_, v| v[0].box_filter(3));
}

#[test]
fn grid_sample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let src = rand_tensor(&[2, 2, 5, 6], &mut rng);
    // Interior, non-integer coordinates.
    let grid = Tensor::from_fn(&[2, 3, 4, 2], |i| {
        let hi = if i[3] == 0 { 5.0 } else { 4.0 };
        0.1 + (hi - 0.2) * (((i[0] * 31 + i[1] * 7 + i[2] * 3 + i[3]) % 17) as f64 / 17.0) + 0.013
    });
    assert_grad(vec![src, grid], &[0, 1], |_, v| v[0].grid_sample(v[1]));
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let g = Graph::new();
    let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), None, 2, 1).value();
    assert_eq!(y.shape(), &[1, 3, 3, 3]);
    for o in 0..3 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut s = 0.0;
                for c in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let (iy, ix) = ((oy * 2 + ki) as isize - 1, (ox * 2 + kj) as isize - 1);
                            if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                s += x.at(&[0, c, iy as usize, ix as usize]) * w.at(&[o, c, ki, kj]);
                            }
                        }
                    }
                }
                assert!((s - y.at(&[0, o, oy, ox])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn box_filter_matches_window_mean() {
    let x = Tensor::from_fn(&[1, 1, 4, 5], |i| (i[2] * 5 + i[3]) as f64);
    let g = Graph::new();
    let y = g.constant(x.clone()).box_filter(3).value();
    assert_eq!(y.shape(), &[1, 1, 2, 3]);
    // Window mean of an affine ramp is its value at the window centre.
    assert!((y.at(&[0, 0, 0, 0]) - x.at(&[0, 0, 1, 1])).abs() < 1e-12);
    assert!((y.at(&[0, 0, 1, 2]) - x.at(&[0, 0, 2, 3])).abs() < 1e-12);
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let g = Graph::new();
    let frozen = g.constant(Tensor::full(&[2], 3.0));
    let live = g.leaf(Tensor::full(&[2], 2.0));
    let loss = (frozen * live).sum();
    let grads = g.backward(loss);
    assert!(grads.get(frozen).is_none());
    assert_eq!(grads.get(live).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn reused_var_accumulates() {
    let g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let y = (x * x + x).sum();
    let grads = g.backward(y);
    assert_eq!(grads.get(x).unwrap().item(), 7.0);
}

#[test]
fn gelu_matches_tanh_form() {
    let g = Graph::new();
    let xs: Vec<f64> = (-400..=400).map(|i| i as f64 * 0.025).collect();
    let y = g.constant(Tensor::new(&[xs.len()], xs.clone()).unwrap()).gelu().value();
    for (x, v) in xs.iter().zip(y.data()) {
        let want = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
        assert!((v - want).abs() < 1e-14, "gelu({x}) = {v}, want {want}");
    }
}

/// Attention spelled out with per-head reshapes, permutes and a softmax.
fn attention_by_parts<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, heads: usize) -> Var<'g> {
    let s = q.shape();
    let (n, t, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let split = |x: Var<'g>| x.reshape(&[n, t, heads, dh]).permute(&[0, 2, 1, 3]).reshape(&[n * heads, t, dh]);
    let scores = split(q).bmm(split(k).permute(&[0, 2, 1])).mul_scalar(1.0 / (dh as f64).sqrt());
    let ctx = scores.softmax_last().bmm(split(v));
    ctx.reshape(&[n, heads, t, dh]).permute(&[0, 2, 1, 3]).reshape(&[n, t, d])
}

#[test]
fn fused_attention_matches_composition_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (q, k, v) =
        (rand_tensor(&[2, 5, 6], &mut rng), rand_tensor(&[2, 5, 6], &mut rng), rand_tensor(&[2, 5, 6], &mut rng));
    let g = Graph::new();
    let (vq, vk, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let fused = vq.attention(vk, vv, 3).value();
    let parts = attention_by_parts(vq, vk, vv, 3).value();
    assert!(fused.data().iter().zip(parts.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    assert_grad(vec![q, k, v], &[0, 1, 2], |_, x| x[0].attention(x[1], x[2], 3));
}
