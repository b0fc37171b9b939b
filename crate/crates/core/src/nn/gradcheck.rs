//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_EPS: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-6)`. The floor keeps entries whose true
/// gradient is zero from dividing round-off by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error between `grad(x)` and central differences of `f`.
pub fn grad_check_fn(f: impl Fn(&[f64]) -> f64, grad: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> f64 {
    let analytic = grad(x);
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        xp[i] = x[i] + FD_EPS;
        let fp = f(&xp);
        xp[i] = x[i] - FD_EPS;
        let fm = f(&xp);
        xp[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (fp - fm) / (2.0 * FD_EPS)));
    }
    worst
}

/// Checks the tape gradient of the scalar `f(x)` with respect to the input `x`.
pub fn grad_check<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |data: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(Tensor::from_vec(&x.shape, data.to_vec()));
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
    // surface forward errors before they are swallowed by the closures
    eval(&x.data)?;
    Ok(grad_check_fn(
        |d| eval(d).unwrap_or(f64::NAN),
        |_| analytic.clone(),
        &x.data,
    ))
}

/// Checks tape gradients of the scalar `f` with respect to parameters.
/// At most `max_per_param` entries of each parameter are probed, spread
/// evenly over the tensor.
pub fn grad_check_params<F>(store: &mut ParamStore, ids: &[ParamId], max_per_param: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    store.zero_grad();
    store.accumulate(&g, &grads);
    let mut worst: f64 = 0.0;
    for &id in ids {
        let n = store.value(id).len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = store.value(id).data[j];
            store.value_mut(id).data[j] = orig + FD_EPS;
            let mut gp = Graph::new();
            let o = f(&mut gp, store)?;
            let fp = gp.value(o).item();
            store.value_mut(id).data[j] = orig - FD_EPS;
            let mut gm = Graph::new();
            let o = f(&mut gm, store)?;
            let fm = gm.value(o).item();
            store.value_mut(id).data[j] = orig;
            worst = worst.max(rel_err(store.grad(id)[j], (fp - fm) / (2.0 * FD_EPS)));
        }
    }
    store.zero_grad();
    Ok(worst)
}

/// Scalar probe `Σ out ⊙ weights` for checking vector-valued ops.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let n = g.value(out).len();
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let t = (i as f64 + 1.0) * 0.618_033_988_749_895 + seed as f64 * 0.414_213_562_373_095;
            2.0 * (t - t.floor()) - 1.0
        })
        .collect();
    let shape = g.shape(out).to_vec();
    let wv = g.input(Tensor::from_vec(&shape, w));
    let p = g.mul(out, wv)?;
    Ok(g.sum_all(p))
}
