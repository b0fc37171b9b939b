use std::sync::Arc;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// `x · W + b` over the last axis of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: store.add_uniform(&format!("{name}.w"), &[d_in, d_out], d_in),
            b: Some(store.add_uniform(&format!("{name}.b"), &[d_out], d_in)),
            d_in,
            d_out,
        }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: store.add_uniform(&format!("{name}.w"), &[d_in, d_out], d_in),
            b: None,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::Shape(format!("linear expects last dim {}, got {shape:?}", self.d_in)));
        }
        let rows = shape.iter().product::<usize>() / self.d_in;
        let x2 = g.reshape(x, &[rows, self.d_in])?;
        let w = g.param(store, self.w);
        let mut y = g.matmul(x2, w)?;
        if let Some(b) = self.b {
            let b = g.param(store, b);
            y = g.add_row(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        g.reshape(y, &out_shape)
    }
}

/// Layer normalisation with a learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add_const(&format!("{name}.gamma"), &[d], 1.0),
            beta: store.add_const(&format!("{name}.beta"), &[d], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = g.layer_norm(x, 1e-5);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_row(y, gamma)?;
        g.add_row(y, beta)
    }
}

/// Flat index permutation between `[b, n, heads, dh]` and `[b, heads, n, dh]`.
fn head_split_index(b: usize, n: usize, heads: usize, dh: usize) -> Arc<[usize]> {
    let d = heads * dh;
    let mut idx = Vec::with_capacity(b * n * d);
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..n {
                for j in 0..dh {
                    idx.push((bi * n + i) * d + h * dh + j);
                }
            }
        }
    }
    idx.into()
}

fn invert(idx: &[usize]) -> Arc<[usize]> {
    let mut inv = vec![0; idx.len()];
    for (o, &i) in idx.iter().enumerate() {
        inv[i] = o;
    }
    inv.into()
}

/// Scaled dot-product self-attention with several heads.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidParam(format!("model dim {d} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d),
            // a key bias shifts every score of a query equally and cancels in the softmax
            k: Linear::no_bias(store, &format!("{name}.k"), d, d),
            v: Linear::new(store, &format!("{name}.v"), d, d),
            o: Linear::new(store, &format!("{name}.o"), d, d),
            heads,
            d,
        })
    }

    /// `x: [b, n, d]`; `mask: [b, n, n]` keeps key `j` for query `i` where
    /// true. Returns the output and the `[b, heads, n, n]` attention weights.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: Option<&[bool]>) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.d {
            return Err(Error::Shape(format!("attention expects [b, n, {}], got {s:?}", self.d)));
        }
        let (b, n) = (s[0], s[1]);
        let dh = self.d / self.heads;
        let split = head_split_index(b, n, self.heads, dh);
        let hs = [b, self.heads, n, dh];
        let q = self.q.forward(g, store, x)?;
        let q = g.gather(q, split.clone(), &hs)?;
        let k = self.k.forward(g, store, x)?;
        let k = g.gather(k, split.clone(), &hs)?;
        let v = self.v.forward(g, store, x)?;
        let v = g.gather(v, split.clone(), &hs)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let full_mask = match mask {
            Some(m) => {
                if m.len() != b * n * n {
                    return Err(Error::Shape(format!("attention mask of {} for {b}x{n}x{n}", m.len())));
                }
                let mut fm = Vec::with_capacity(b * self.heads * n * n);
                for bi in 0..b {
                    for _ in 0..self.heads {
                        fm.extend_from_slice(&m[bi * n * n..(bi + 1) * n * n]);
                    }
                }
                Some(fm)
            }
            None => None,
        };
        let att = g.softmax(scores, full_mask.as_deref())?;
        let ctx = g.matmul(att, v)?;
        let ctx = g.gather(ctx, invert(&split), &[b, n, self.d])?;
        let out = self.o.forward(g, store, ctx)?;
        Ok((out, att))
    }
}

/// Gated recurrent unit, `h' = (1 − z)⊙h + z⊙h̃` with
/// `h̃ = tanh(W x + U (r⊙h) + b)`.
#[derive(Debug, Clone)]
pub struct Gru {
    pub w_x: ParamId,
    pub u_zr: ParamId,
    pub u_n: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_h: usize) -> Self {
        Gru {
            w_x: store.add_uniform(&format!("{name}.w_x"), &[d_in, 3 * d_h], d_h),
            u_zr: store.add_uniform(&format!("{name}.u_zr"), &[d_h, 2 * d_h], d_h),
            u_n: store.add_uniform(&format!("{name}.u_n"), &[d_h, d_h], d_h),
            b: store.add_uniform(&format!("{name}.b"), &[3 * d_h], d_h),
            d_in,
            d_h,
        }
    }

    /// One step from the precomputed input projection `xp: [b, 3·d_h]`.
    fn step(&self, g: &mut Graph, store: &ParamStore, xp: Var, h: Var) -> Result<Var> {
        let dh = self.d_h;
        let u_zr = g.param(store, self.u_zr);
        let u_n = g.param(store, self.u_n);
        let hp = g.matmul(h, u_zr)?;
        let xz = g.slice(xp, 1, 0, dh)?;
        let xr = g.slice(xp, 1, dh, dh)?;
        let xn = g.slice(xp, 1, 2 * dh, dh)?;
        let hz = g.slice(hp, 1, 0, dh)?;
        let hr = g.slice(hp, 1, dh, dh)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let un = g.matmul(rh, u_n)?;
        let cand = g.add(xn, un)?;
        let cand = g.tanh(cand);
        let diff = g.sub(cand, h)?;
        let upd = g.mul(z, diff)?;
        g.add(h, upd)
    }

    fn project(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w_x);
        let b = g.param(store, self.b);
        let xp = g.matmul(x, w)?;
        g.add_row(xp, b)
    }

    /// Single step on `x: [b, d_in]`, `h: [b, d_h]`.
    pub fn cell(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let xp = self.project(g, store, x)?;
        self.step(g, store, xp, h)
    }

    /// Runs over the rows of `xs: [t, d_in]` from a zero state; returns `[t, d_h]`.
    pub fn sequence(&self, g: &mut Graph, store: &ParamStore, xs: Var) -> Result<Var> {
        let s = g.shape(xs).to_vec();
        if s.len() != 2 || s[1] != self.d_in || s[0] == 0 {
            return Err(Error::Shape(format!("gru expects [t, {}], got {s:?}", self.d_in)));
        }
        let xp = self.project(g, store, xs)?;
        let mut h = g.input(super::Tensor::zeros(&[1, self.d_h]));
        let mut hs = Vec::with_capacity(s[0]);
        for t in 0..s[0] {
            let xt = g.slice(xp, 0, t, 1)?;
            h = self.step(g, store, xt, h)?;
            hs.push(h);
        }
        g.concat(&hs, 0)
    }
}

/// Index map for `[c·r², h, w] → [c, r·h, r·w]`.
pub fn pixel_shuffle_index(c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let src_c = ch * r * r + (y % r) * r + x % r;
                idx.push((src_c * h + y / r) * w + x / r);
            }
        }
    }
    idx
}

/// Index map for the inverse `[c, r·h, r·w] → [c·r², h, w]`.
pub fn pixel_unshuffle_index(c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    invert(&pixel_shuffle_index(c, h, w, r)).to_vec()
}

/// Sub-pixel upsampling of `x: [c·r², h, w]`.
pub fn pixel_shuffle(g: &mut Graph, x: Var, r: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || r == 0 || s[0] % (r * r) != 0 {
        return Err(Error::Shape(format!("pixel shuffle of {s:?} by {r}")));
    }
    let c = s[0] / (r * r);
    let idx = pixel_shuffle_index(c, s[1], s[2], r);
    g.gather(x, idx.into(), &[c, s[1] * r, s[2] * r])
}

pub fn pixel_unshuffle(g: &mut Graph, x: Var, r: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || r == 0 || s[1] % r != 0 || s[2] % r != 0 {
        return Err(Error::Shape(format!("pixel unshuffle of {s:?} by {r}")));
    }
    let (h, w) = (s[1] / r, s[2] / r);
    let idx = pixel_unshuffle_index(s[0], h, w, r);
    g.gather(x, idx.into(), &[s[0] * r * r, h, w])
}
