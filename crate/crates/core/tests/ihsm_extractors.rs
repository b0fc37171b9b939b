mod common;

use tiqa::ihsm::{CoarseConfig, CoarseExtractor, FineConfig, FineExtractor, Ihsm, StageConfig};
use tiqa::nn::gradcheck::{grad_check, grad_check_params, project};
use tiqa::nn::{Graph, ParamStore, Tensor};

use common::{rand_tensor, rng};

const TOL: f64 = 1e-4;

fn toy_coarse(r: usize) -> CoarseConfig {
    CoarseConfig {
        input: 8,
        patch: 2,
        window: 2,
        mlp_ratio: 2,
        stages: vec![StageConfig { dim: 4, heads: 2, pairs: 1, merge: false }],
        dwsa_stage: Some(0),
        dwsa_upsample_r: r,
        dwsa_heads: 1,
        offset_clamp: 1.5,
        out_dim: 3,
    }
}

#[test]
fn coarse_toy_gradient_check_on_8x8_frames() {
    for seed in 0..6u64 {
        let cfg = toy_coarse(1 + (seed as usize % 2));
        let mut store = ParamStore::new(seed);
        let ex = CoarseExtractor::new(&mut store, "c", &cfg, 1).unwrap();
        let x = rand_tensor(&mut rng(seed), &[2, 1, 8, 8], 0.0, 1.0);
        let ein = grad_check(
            |g, v| {
                let o = ex.forward(g, &store, v)?;
                project(g, o, seed)
            },
            &x,
        )
        .unwrap();
        let ids: Vec<_> = store.ids().collect();
        let ep = grad_check_params(&mut store, &ids, 6, |g, s| {
            let v = g.input(x.clone());
            let o = ex.forward(g, s, v)?;
            project(g, o, seed)
        })
        .unwrap();
        assert!(ein <= TOL && ep <= TOL, "seed {seed}: input {ein:e}, params {ep:e}");
    }
}

#[test]
fn fine_toy_gradient_check() {
    let cfg = FineConfig { stem: 2, blocks: vec![3], out_dim: 3 };
    for seed in 0..6u64 {
        let mut store = ParamStore::new(seed);
        let ex = FineExtractor::new(&mut store, "f", &cfg, 1);
        let x = rand_tensor(&mut rng(seed + 50), &[2, 1, 8, 8], 0.0, 1.0);
        let ein = grad_check(
            |g, v| {
                let o = ex.forward(g, &store, v)?;
                project(g, o, seed)
            },
            &x,
        )
        .unwrap();
        let ids: Vec<_> = store.ids().collect();
        let ep = grad_check_params(&mut store, &ids, 6, |g, s| {
            let v = g.input(x.clone());
            let o = ex.forward(g, s, v)?;
            project(g, o, seed)
        })
        .unwrap();
        assert!(ein <= TOL && ep <= TOL, "seed {seed}: input {ein:e}, params {ep:e}");
    }
}

#[test]
fn every_extractor_parameter_gets_gradient() {
    let coarse = CoarseConfig {
        input: 16,
        patch: 2,
        window: 2,
        mlp_ratio: 2,
        stages: vec![
            StageConfig { dim: 4, heads: 1, pairs: 1, merge: false },
            StageConfig { dim: 8, heads: 2, pairs: 1, merge: true },
        ],
        dwsa_stage: Some(1),
        dwsa_upsample_r: 2,
        dwsa_heads: 1,
        offset_clamp: 1.0,
        out_dim: 5,
    };
    let fine = FineConfig { stem: 2, blocks: vec![4, 4], out_dim: 5 };
    let mut store = ParamStore::new(9);
    let m = Ihsm::new(&mut store, &coarse, &fine, 3).unwrap();
    let mut r = rng(9);
    let mut g = Graph::new();
    let c = g.input(rand_tensor(&mut r, &[3, 3, 16, 16], 0.0, 1.0));
    let f = g.input(rand_tensor(&mut r, &[3, 3, 24, 24], 0.0, 1.0));
    let y = m.forward(&mut g, &store, c, f).unwrap();
    assert_eq!(g.shape(y), &[3, 10]);
    let loss = project(&mut g, y, 1).unwrap();
    let grads = g.backward(loss).unwrap();
    store.accumulate(&g, &grads);
    let dead: Vec<&str> = store
        .ids()
        .filter(|&id| store.grad(id).iter().all(|v| *v == 0.0))
        .map(|id| store.name(id))
        .collect();
    assert!(dead.is_empty(), "no gradient reaches {dead:?}");
    assert!(store.ids().any(|id| store.name(id).ends_with("dw.offset.w")));
}

#[test]
fn frame_permutation_permutes_rows() {
    let mut store = ParamStore::new(4);
    let m = Ihsm::new(&mut store, &toy_coarse(2), &FineConfig { stem: 2, blocks: vec![3], out_dim: 3 }, 1).unwrap();
    let x = rand_tensor(&mut rng(4), &[3, 1, 8, 8], 0.0, 1.0);
    let perm = [2usize, 0, 1];
    let px = Tensor::from_vec(&[3, 1, 8, 8], perm.iter().flat_map(|&i| x.data[i * 64..(i + 1) * 64].to_vec()).collect());
    let run = |t: &Tensor| {
        let mut g = Graph::new();
        let a = g.input(t.clone());
        let b = g.input(t.clone());
        let y = m.forward(&mut g, &store, a, b).unwrap();
        g.value(y).clone()
    };
    let (y, py) = (run(&x), run(&px));
    for (row, &src) in perm.iter().enumerate() {
        assert_eq!(py.row(row), y.row(src));
    }
}
