#![allow(dead_code)]

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tiqa::igtm::{build_adjacency, GatLayer};
use tiqa::ihsm::{DwSaConfig, WindowBlock};
use tiqa::media::{Frame, VideoTensor};
use tiqa::nn::gradcheck::{grad_check, grad_check_params, project};
use tiqa::nn::{pixel_shuffle, Graph, Gru, LayerNorm, Linear, MultiHeadAttention, ParamStore, Tensor, Unary, Var};
use tiqa::synth::{Pattern, PatternField};
use tiqa::train::loss_mse_srcc;
use tiqa::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

pub fn random_video(rng: &mut impl Rng, frames: usize, h: usize, w: usize, c: usize) -> VideoTensor {
    let frames = (0..frames)
        .map(|_| Frame::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(0.0..=1.0)).collect()))
        .collect();
    VideoTensor::new(frames, 25.0).unwrap()
}

/// A pattern rendered at the origin and at `(sx, sy)`; the true flow from the
/// first to the second frame is `(sx, sy)` everywhere.
pub fn shifted_pair(pattern: Pattern, n: usize, sx: f64, sy: f64, seed: u64) -> (Frame, Frame) {
    let field = PatternField::new(pattern, n, n, &mut rng(seed));
    (field.render(n, n, 0.0, 0.0), field.render(n, n, sx, sy))
}

pub const PATTERNS: [Pattern; 3] = [Pattern::Checker, Pattern::GradientDrift, Pattern::NoiseTexture];

/// Worst relative error of `out = f(a, b)` projected to a scalar, checked with
/// respect to each argument in turn.
fn check2<F>(f: F, a: &Tensor, b: &Tensor, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, Var, Var) -> Result<Var>,
{
    let ea = grad_check(
        |g, x| {
            let y = g.input(b.clone());
            let o = f(g, x, y)?;
            project(g, o, seed)
        },
        a,
    )?;
    let eb = grad_check(
        |g, y| {
            let x = g.input(a.clone());
            let o = f(g, x, y)?;
            project(g, o, seed)
        },
        b,
    )?;
    Ok(ea.max(eb))
}

fn check1<F>(f: F, a: &Tensor, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check(
        |g, x| {
            let o = f(g, x)?;
            project(g, o, seed)
        },
        a,
    )
}

fn dim(rng: &mut impl Rng) -> usize {
    rng.gen_range(2..=5)
}

/// Random partition of `0..n` into groups of at least two rows.
fn random_groups(rng: &mut impl Rng, n: usize) -> Arc<[Vec<usize>]> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let len = rng.gen_range(2..=3).min(n - i);
        let len = if n - i - len == 1 { len + 1 } else { len };
        out.push(idx[i..i + len].to_vec());
        i += len;
    }
    out.into()
}

/// Checks every differentiable graph primitive and layer on inputs drawn
/// from `seed`. Returns the worst relative error per case.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let (m, k, n) = (dim(&mut r), dim(&mut r), dim(&mut r));

    let a = rand_tensor(&mut r, &[m, k], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[k, n], -1.0, 1.0);
    out.push(("matmul", check2(|g, x, y| g.matmul(x, y), &a, &b, seed)?));
    let bt = rand_tensor(&mut r, &[n, k], -1.0, 1.0);
    out.push(("matmul_nt", check2(|g, x, y| g.matmul_nt(x, y), &a, &bt, seed)?));
    let ab = rand_tensor(&mut r, &[2, m, k], -1.0, 1.0);
    let bb = rand_tensor(&mut r, &[2, k, n], -1.0, 1.0);
    out.push(("matmul_batched", check2(|g, x, y| g.matmul(x, y), &ab, &bb, seed)?));

    let x = rand_tensor(&mut r, &[m, n], -1.0, 1.0);
    let y = rand_tensor(&mut r, &[m, n], -1.0, 1.0);
    let pos = rand_tensor(&mut r, &[m, n], 0.5, 2.0);
    out.push(("add", check2(|g, p, q| g.add(p, q), &x, &y, seed)?));
    out.push(("sub", check2(|g, p, q| g.sub(p, q), &x, &y, seed)?));
    out.push(("mul", check2(|g, p, q| g.mul(p, q), &x, &y, seed)?));
    out.push(("div", check2(|g, p, q| g.div(p, q), &x, &pos, seed)?));

    let x3 = rand_tensor(&mut r, &[m, k, n], -1.0, 1.0);
    let axis = r.gen_range(0..3);
    let v = rand_tensor(&mut r, &[x3.shape[axis]], -1.0, 1.0);
    out.push(("add_axis", check2(|g, p, q| g.add_axis(p, q, axis), &x3, &v, seed)?));
    out.push(("mul_axis", check2(|g, p, q| g.mul_axis(p, q, axis), &x3, &v, seed)?));
    let row = rand_tensor(&mut r, &[n], -1.0, 1.0);
    out.push(("add_row", check2(|g, p, q| g.add_row(p, q), &x, &row, seed)?));
    out.push(("mul_row", check2(|g, p, q| g.mul_row(p, q), &x, &row, seed)?));
    let c: f64 = r.gen_range(-2.0..2.0);
    out.push(("scale", check1(|g, p| Ok(g.scale(p, c)), &x, seed)?));
    out.push(("add_scalar", check1(|g, p| Ok(g.add_scalar(p, c)), &x, seed)?));

    let unaries: [(&'static str, Unary, f64, f64); 9] = [
        ("relu", Unary::Relu, -1.0, 1.0),
        ("leaky_relu", Unary::LeakyRelu(0.2), -1.0, 1.0),
        ("elu", Unary::Elu, -2.0, 2.0),
        ("sigmoid", Unary::Sigmoid, -3.0, 3.0),
        ("tanh", Unary::Tanh, -2.0, 2.0),
        ("gelu", Unary::Gelu, -3.0, 3.0),
        ("sqrt", Unary::Sqrt, 0.2, 2.0),
        ("square", Unary::Square, -2.0, 2.0),
        ("exp", Unary::Exp, -2.0, 2.0),
    ];
    for (name, u, lo, hi) in unaries {
        let t = rand_tensor(&mut r, &[m, n], lo, hi);
        out.push((name, check1(|g, p| Ok(g.unary(p, u)), &t, seed)?));
    }

    let y2 = rand_tensor(&mut r, &[m, k], -1.0, 1.0);
    out.push(("concat", check2(|g, p, q| g.concat(&[p, q], 1), &x, &y2, seed)?));
    let start = r.gen_range(0..n - 1);
    let len = r.gen_range(1..=n - start);
    out.push(("slice", check1(|g, p| g.slice(p, 1, start, len), &x, seed)?));
    let idx: Arc<[usize]> = (0..m * n + 3).map(|_| r.gen_range(0..m * n)).collect();
    out.push(("gather", check1(|g, p| g.gather(p, idx.clone(), &[idx.len()]), &x, seed)?));
    out.push(("reshape", check1(|g, p| g.reshape(p, &[n, m]), &x, seed)?));
    let ax = r.gen_range(0..3);
    out.push(("mean_axis", check1(|g, p| g.mean_axis(p, ax), &x3, seed)?));
    out.push(("sum_all", check1(|g, p| Ok(g.sum_all(p)), &x3, seed)?));
    out.push(("mean_all", check1(|g, p| Ok(g.mean_all(p)), &x3, seed)?));

    let rows = r.gen_range(4..=8);
    let xg = rand_tensor(&mut r, &[rows, n], -1.0, 1.0);
    let groups = random_groups(&mut r, rows);
    out.push(("group_mean", check1(|g, p| g.group_mean(p, groups.clone()), &xg, seed)?));
    out.push(("group_std", check1(|g, p| g.group_std(p, groups.clone()), &xg, seed)?));

    let mut mask: Vec<bool> = (0..m * n).map(|_| r.gen_bool(0.7)).collect();
    for i in 0..m {
        mask[i * n + r.gen_range(0..n)] = true;
    }
    out.push(("softmax", check1(|g, p| g.softmax(p, None), &x, seed)?));
    out.push(("softmax_masked", check1(|g, p| g.softmax(p, Some(&mask)), &x, seed)?));
    out.push(("layer_norm", check1(|g, p| Ok(g.layer_norm(p, 1e-5)), &x, seed)?));

    let (cin, cout) = (dim(&mut r), dim(&mut r));
    let side = r.gen_range(4..=6);
    let img = rand_tensor(&mut r, &[2, cin, side, side], -1.0, 1.0);
    let kern = rand_tensor(&mut r, &[cout, cin, 3, 3], -0.5, 0.5);
    let stride = r.gen_range(1..=2);
    out.push(("conv2d", check2(|g, p, q| g.conv2d(p, q, stride, 1), &img, &kern, seed)?));

    let (h, w) = (r.gen_range(3..=5), r.gen_range(3..=5));
    let map = rand_tensor(&mut r, &[2, h, w, 2], -1.0, 1.0);
    let npts = r.gen_range(3..=6);
    let coords = Tensor::from_vec(
        &[2, npts, 2],
        (0..2 * npts)
            .flat_map(|_| [r.gen_range(-0.5..w as f64 - 0.5), r.gen_range(-0.5..h as f64 - 0.5)])
            .collect(),
    );
    out.push(("bilinear_sample", check2(|g, p, q| g.bilinear_sample(p, q), &map, &coords, seed)?));

    let cs = rand_tensor(&mut r, &[8, 2, 2], -1.0, 1.0);
    out.push(("pixel_shuffle", check1(|g, p| pixel_shuffle(g, p, 2), &cs, seed)?));

    out.push(("linear", layer_check(seed, &mut r, |s| Linear::new(s, "l", k, n), |l, g, s, x| l.forward(g, s, x), &[m, k])?));
    out.push(("layer_norm_affine", layer_check(seed, &mut r, |s| LayerNorm::new(s, "ln", k), |l, g, s, x| l.forward(g, s, x), &[m, k])?));
    let t = r.gen_range(2..=4);
    let amask: Vec<bool> = (0..2 * t * t).map(|p| p % t <= (p / t) % t).collect();
    out.push((
        "attention",
        layer_check(
            seed,
            &mut r,
            |s| MultiHeadAttention::new(s, "mha", 4, 2).unwrap(),
            |l, g, s, x| Ok(l.forward(g, s, x, Some(&amask))?.0),
            &[2, t, 4],
        )?,
    ));
    Ok(out)
}

/// Checks a layer with respect to its input and all its parameters.
fn layer_check<L, B, F>(seed: u64, r: &mut impl Rng, build: B, f: F, in_shape: &[usize]) -> Result<f64>
where
    B: FnOnce(&mut ParamStore) -> L,
    F: Fn(&L, &mut Graph, &ParamStore, Var) -> Result<Var>,
{
    let mut store = ParamStore::new(seed);
    let layer = build(&mut store);
    perturb(&mut store, r);
    let x = rand_tensor(r, in_shape, -1.0, 1.0);
    let ein = grad_check(
        |g, v| {
            let o = f(&layer, g, &store, v)?;
            project(g, o, seed)
        },
        &x,
    )?;
    let ids: Vec<_> = store.ids().collect();
    let ep = grad_check_params(&mut store, &ids, 16, |g, s| {
        let v = g.input(x.clone());
        let o = f(&layer, g, s, v)?;
        project(g, o, seed)
    })?;
    Ok(ein.max(ep))
}

/// Moves every parameter off its initial value so constant inits (unit
/// gains, zero biases) do not hide wrong gradients.
fn perturb(store: &mut ParamStore, r: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.value_mut(id).data.iter_mut().for_each(|v| *v += r.gen_range(-0.3..0.3));
    }
}

/// Deformable window block on an 8×8 token grid.
pub fn dwsa_check(seed: u64, upsample_r: usize) -> Result<f64> {
    let mut r = rng(seed ^ 0xD5A);
    let dim = 4;
    let cfg = DwSaConfig { window: 4, shift: 2, upsample_r, heads: 1, offset_clamp: 1.5 };
    let mut store = ParamStore::new(seed);
    let block = WindowBlock::new_dwsa(&mut store, "blk", dim, &cfg, 2)?;
    perturb(&mut store, &mut r);
    let x = rand_tensor(&mut r, &[1, 8, 8, dim], -1.0, 1.0);
    let ein = grad_check(
        |g, v| {
            let o = block.apply(g, &store, v)?;
            project(g, o, seed)
        },
        &x,
    )?;
    let ids: Vec<_> = store.ids().collect();
    let ep = grad_check_params(&mut store, &ids, 12, |g, s| {
        let v = g.input(x.clone());
        let o = block.apply(g, s, v)?;
        project(g, o, seed)
    })?;
    Ok(ein.max(ep))
}

/// Graph attention layer on 5 nodes of width 6.
pub fn gat_check(seed: u64) -> Result<f64> {
    let mut r = rng(seed ^ 0x6A7);
    let mut store = ParamStore::new(seed);
    let layer = GatLayer::new(&mut store, "gat", 6, 4);
    let x = rand_tensor(&mut r, &[5, 6], -1.0, 1.0);
    let adj = build_adjacency(&x, 2);
    let ein = grad_check(
        |g, v| {
            let (o, _) = layer.forward(g, &store, v, &adj)?;
            project(g, o, seed)
        },
        &x,
    )?;
    let ids: Vec<_> = store.ids().collect();
    let ep = grad_check_params(&mut store, &ids, 24, |g, s| {
        let v = g.input(x.clone());
        let (o, _) = layer.forward(g, s, v, &adj)?;
        project(g, o, seed)
    })?;
    Ok(ein.max(ep))
}

/// GRU unrolled over 3 steps.
pub fn gru_check(seed: u64) -> Result<f64> {
    let mut r = rng(seed ^ 0x62);
    let mut store = ParamStore::new(seed);
    let gru = Gru::new(&mut store, "gru", 5, 4);
    let x = rand_tensor(&mut r, &[3, 5], -1.0, 1.0);
    let ein = grad_check(
        |g, v| {
            let o = gru.sequence(g, &store, v)?;
            project(g, o, seed)
        },
        &x,
    )?;
    let ids: Vec<_> = store.ids().collect();
    let ep = grad_check_params(&mut store, &ids, 24, |g, s| {
        let v = g.input(x.clone());
        let o = gru.sequence(g, s, v)?;
        project(g, o, seed)
    })?;
    Ok(ein.max(ep))
}

/// Regression loss with respect to the predictions.
pub fn loss_check(seed: u64, temperature: f64) -> Result<f64> {
    let mut r = rng(seed ^ 0x1055);
    let n = r.gen_range(5..=12);
    let pred = rand_tensor(&mut r, &[n], 0.0, 1.0);
    let target: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
    grad_check(|g, p| loss_mse_srcc(g, p, &target, temperature), &pred)
}

/// Every case of the gradient suite for one seed.
pub fn grad_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = primitive_suite(seed)?;
    out.push(("dwsa_r1", dwsa_check(seed, 1)?));
    out.push(("dwsa_r2", dwsa_check(seed, 2)?));
    out.push(("gat", gat_check(seed)?));
    out.push(("gru_3step", gru_check(seed)?));
    out.push(("loss_mse_srcc", loss_check(seed, 0.05)?));
    Ok(out)
}
