use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{axis_split, gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    Elu,
    Sigmoid,
    Tanh,
    Gelu,
    Sqrt,
    Square,
    Exp,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Exp => x.exp(),
        }
    }

    /// dy/dx given input and output.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => (x > 0.0) as u8 as f64,
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Gelu => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Exp => y,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddAxis { x: Var, b: Var, axis: usize },
    MulAxis { x: Var, g: Var, axis: usize },
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, idx: Arc<[usize]> },
    Reshape(Var),
    MeanAxis { x: Var, axis: usize },
    SumAll(Var),
    GroupMean { x: Var, groups: Arc<[Vec<usize>]> },
    GroupStd { x: Var, groups: Arc<[Vec<usize>]> },
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize, cols: Vec<f64> },
    Bilinear { map: Var, coords: Var },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
/// insertion order is a valid topological order for backpropagation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.g[v.0].as_deref()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Parameter leaf; repeated requests within one graph share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars.iter().map(|(&p, &v)| (p, v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// `[.., m, k] · [.., k, n]` (or `[.., n, k]` transposed when `tb`), with
    /// leading dimensions flattened into a batch.
    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(Error::Shape(format!("matmul inner dims {sa:?} x {sb:?} (tb={tb})")));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (&self.value(a).data, &self.value(b).data);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    false,
                    &bv[i * k * n..],
                    tb,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(Tensor::from_vec(&shape, out), Op::MatMul { a, b, batch, m, k, n, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        same_shape(self.value(a), self.value(b), what)?;
        Ok(self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "add", |x, y| x + y)?;
        let s = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_vec(&s, d), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "sub", |x, y| x - y)?;
        let s = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_vec(&s, d), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "mul", |x, y| x * y)?;
        let s = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_vec(&s, d), Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "div", |x, y| x / y)?;
        let s = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_vec(&s, d), Op::Div(a, b)))
    }

    fn axis_check(&self, x: Var, b: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() || self.value(b).len() != s[axis] {
            return Err(Error::Shape(format!(
                "broadcast of {:?} along axis {axis} of {s:?}",
                self.shape(b)
            )));
        }
        Ok(axis_split(s, axis))
    }

    /// `x + b` with `b` broadcast along `axis`.
    pub fn add_axis(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (o, n, inner) = self.axis_check(x, b, axis)?;
        let mut d = self.value(x).data.clone();
        let bv = &self.value(b).data;
        for i in 0..o {
            for j in 0..n {
                let base = (i * n + j) * inner;
                d[base..base + inner].iter_mut().for_each(|v| *v += bv[j]);
            }
        }
        let s = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_vec(&s, d), Op::AddAxis { x, b, axis }))
    }

    /// `x + b` with `b` broadcast over rows (last axis).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let axis = self.shape(x).len() - 1;
        self.add_axis(x, b, axis)
    }

    /// `x ⊙ g` with `g` broadcast along `axis`.
    pub fn mul_axis(&mut self, x: Var, g: Var, axis: usize) -> Result<Var> {
        let (o, n, inner) = self.axis_check(x, g, axis)?;
        let mut d = self.value(x).data.clone();
        let gv = &self.value(g).data;
        for i in 0..o {
            for j in 0..n {
                let base = (i * n + j) * inner;
                d[base..base + inner].iter_mut().for_each(|v| *v *= gv[j]);
            }
        }
        let s = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_vec(&s, d), Op::MulAxis { x, g, axis }))
    }

    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let axis = self.shape(x).len() - 1;
        self.mul_axis(x, g, axis)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let v = Tensor::from_vec(&t.shape, t.data.iter().map(|v| v * c).collect());
        self.push(v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let v = Tensor::from_vec(&t.shape, t.data.iter().map(|v| v + c).collect());
        self.push(v, Op::AddScalar(x))
    }

    pub fn unary(&mut self, x: Var, u: Unary) -> Var {
        let t = self.value(x);
        let v = Tensor::from_vec(&t.shape, t.data.iter().map(|&v| u.apply(v)).collect());
        self.push(v, Op::Unary(x, u))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Elu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape(format!("concat {s:?} with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let s = self.shape(p);
                let chunk = s[axis] * inner;
                out.extend_from_slice(&self.value(p).data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Shape(format!("slice {start}..{} of axis {axis} in {s:?}", start + len)));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let d = &self.value(x).data;
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Slice { x, axis, start }))
    }

    /// `out.flat[i] = x.flat[idx[i]]`; covers reshapes, transposes, window
    /// partitions, cyclic shifts and pixel shuffles.
    pub fn gather(&mut self, x: Var, idx: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != idx.len() || idx.iter().any(|&i| i >= n) {
            return Err(Error::Shape(format!("gather of {} indices into {shape:?}", idx.len())));
        }
        let d = &self.value(x).data;
        let out = idx.iter().map(|&i| d[i]).collect();
        Ok(self.push(Tensor::from_vec(shape, out), Op::Gather { x, idx }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::Shape(format!("reshape {:?} to {shape:?}", t.shape)));
        }
        let v = Tensor::from_vec(shape, t.data.clone());
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::Shape(format!("mean over axis {axis} of {s:?}")));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = &self.value(x).data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(Tensor::from_vec(&shape, out), Op::MeanAxis { x, axis }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    fn group_check(&self, x: Var, groups: &[Vec<usize>]) -> Result<(usize, usize)> {
        let s = self.shape(x);
        let rows = s[0];
        let d = self.value(x).len() / rows.max(1);
        if groups.iter().any(|g| g.is_empty() || g.iter().any(|&r| r >= rows)) {
            return Err(Error::Shape(format!("row groups out of range for {s:?}")));
        }
        Ok((rows, d))
    }

    fn group_shape(&self, x: Var, n_groups: usize) -> Vec<usize> {
        let mut shape = self.shape(x).to_vec();
        shape[0] = n_groups;
        shape
    }

    /// Mean over each group of rows (first axis).
    pub fn group_mean(&mut self, x: Var, groups: Arc<[Vec<usize>]>) -> Result<Var> {
        let (_, d) = self.group_check(x, &groups)?;
        let xv = &self.value(x).data;
        let mut out = vec![0.0; groups.len() * d];
        for (gi, g) in groups.iter().enumerate() {
            let dst = &mut out[gi * d..(gi + 1) * d];
            for &r in g {
                dst.iter_mut().zip(&xv[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
            }
            dst.iter_mut().for_each(|v| *v /= g.len() as f64);
        }
        let shape = self.group_shape(x, groups.len());
        Ok(self.push(Tensor::from_vec(&shape, out), Op::GroupMean { x, groups }))
    }

    /// Population standard deviation over each group of rows. The gradient
    /// of a zero deviation is taken as zero.
    pub fn group_std(&mut self, x: Var, groups: Arc<[Vec<usize>]>) -> Result<Var> {
        let (_, d) = self.group_check(x, &groups)?;
        let xv = &self.value(x).data;
        let mut out = vec![0.0; groups.len() * d];
        for (gi, g) in groups.iter().enumerate() {
            let n = g.len() as f64;
            for c in 0..d {
                let mean = g.iter().map(|&r| xv[r * d + c]).sum::<f64>() / n;
                let var = g.iter().map(|&r| (xv[r * d + c] - mean).powi(2)).sum::<f64>() / n;
                out[gi * d + c] = var.sqrt();
            }
        }
        let shape = self.group_shape(x, groups.len());
        Ok(self.push(Tensor::from_vec(&shape, out), Op::GroupStd { x, groups }))
    }

    /// Softmax over the last axis. Entries where `mask` is false get
    /// probability exactly zero; every row needs at least one kept entry.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if d == 0 {
            return Err(Error::Shape("softmax over an empty axis".into()));
        }
        if let Some(m) = mask {
            if m.len() != t.len() {
                return Err(Error::Shape(format!("softmax mask of {} for {:?}", m.len(), t.shape)));
            }
        }
        let mut out = vec![0.0; t.len()];
        for (r, row) in t.data.chunks_exact(d).enumerate() {
            let keep = |j: usize| mask.map_or(true, |m| m[r * d + j]);
            if !(0..d).any(keep) {
                return Err(Error::Shape(format!("softmax row {r} has no unmasked entries")));
            }
            if (0..d).any(|j| keep(j) && !row[j].is_finite()) {
                return Err(Error::Numeric(format!("non-finite softmax input in row {r}")));
            }
            let mx = (0..d).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..d {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    out[r * d + j] = e;
                    s += e;
                }
            }
            out[r * d..(r + 1) * d].iter_mut().for_each(|v| *v /= s);
        }
        let shape = t.shape.clone();
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Softmax(x)))
    }

    /// Normalises the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let mut out = vec![0.0; t.len()];
        let mut inv_std = Vec::with_capacity(t.len() / d.max(1));
        for (r, row) in t.data.chunks_exact(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv;
            }
            inv_std.push(inv);
        }
        let shape = t.shape.clone();
        self.push(Tensor::from_vec(&shape, out), Op::LayerNorm { x, inv_std })
    }

    /// 2-D convolution of `x: [n, c_in, h, w]` with `w: [c_out, c_in, k, k]`,
    /// edge-replicating `pad` pixels on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::Shape(format!("conv2d input {sx:?} weight {sw:?}")));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!("conv2d kernel {k} larger than padded input {sx:?}")));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let (p, ckk) = (oh * ow, cin * k * k);
        let cols = im2col(&self.value(x).data, [n, cin, h, wd], k, stride, pad, oh, ow);
        let mut om = vec![0.0; cout * n * p];
        gemm(cout, ckk, n * p, &self.value(w).data, false, &cols, false, &mut om, false);
        let mut out = vec![0.0; n * cout * p];
        for co in 0..cout {
            for b in 0..n {
                out[(b * cout + co) * p..(b * cout + co + 1) * p]
                    .copy_from_slice(&om[co * n * p + b * p..co * n * p + (b + 1) * p]);
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[n, cout, oh, ow], out),
            Op::Conv2d { x, w, stride, pad, cols },
        ))
    }

    /// Samples `map: [b, h, w, c]` at `coords: [b, n, 2]` (x, y in pixel
    /// units) with bilinear interpolation and edge clamping.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var> {
        let (sm, sc) = (self.shape(map).to_vec(), self.shape(coords).to_vec());
        if sm.len() != 4 || sc.len() != 3 || sc[0] != sm[0] || sc[2] != 2 {
            return Err(Error::Shape(format!("bilinear_sample map {sm:?} coords {sc:?}")));
        }
        let (b, h, w, c) = (sm[0], sm[1], sm[2], sm[3]);
        let n = sc[1];
        let (mv, cv) = (&self.value(map).data, &self.value(coords).data);
        let mut out = vec![0.0; b * n * c];
        for bi in 0..b {
            for i in 0..n {
                let (x, y) = (cv[(bi * n + i) * 2], cv[(bi * n + i) * 2 + 1]);
                let taps = bilinear_taps(x, y, h, w);
                let dst = &mut out[(bi * n + i) * c..(bi * n + i + 1) * c];
                for (yy, xx, wt) in taps {
                    let src = &mv[((bi * h + yy) * w + xx) * c..][..c];
                    dst.iter_mut().zip(src).for_each(|(o, s)| *o += wt * s);
                }
            }
        }
        Ok(self.push(Tensor::from_vec(&[b, n, c], out), Op::Bilinear { map, coords }))
    }

    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Backpropagates `seed` (same size as `out`) through the tape.
    pub fn backward_with(&self, out: Var, seed: Vec<f64>) -> Result<Grads> {
        if seed.len() != self.value(out).len() {
            return Err(Error::Shape("backward seed size".into()));
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        g[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            self.backprop_node(i, &dy, &mut g);
            g[i] = Some(dy);
        }
        g.resize(self.nodes.len(), None);
        Ok(Grads { g })
    }

    fn backprop_node(&self, i: usize, dy: &[f64], g: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, batch, m, k, n, tb } => {
                let (av, bv) = (&val(a).data, &val(b).data);
                {
                    let ga = acc(g, a, av.len());
                    for bi in 0..batch {
                        let dc = &dy[bi * m * n..];
                        let bb = &bv[bi * k * n..];
                        gemm(m, n, k, dc, false, bb, !tb, &mut ga[bi * m * k..], true);
                    }
                }
                let gb = acc(g, b, bv.len());
                for bi in 0..batch {
                    let dc = &dy[bi * m * n..];
                    let aa = &av[bi * m * k..];
                    if tb {
                        gemm(n, m, k, dc, true, aa, false, &mut gb[bi * k * n..], true);
                    } else {
                        gemm(k, m, n, aa, true, dc, false, &mut gb[bi * k * n..], true);
                    }
                }
            }
            &Op::Add(a, b) => {
                add_into(acc(g, a, dy.len()), dy, 1.0);
                add_into(acc(g, b, dy.len()), dy, 1.0);
            }
            &Op::Sub(a, b) => {
                add_into(acc(g, a, dy.len()), dy, 1.0);
                add_into(acc(g, b, dy.len()), dy, -1.0);
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (&val(a).data, &val(b).data);
                acc(g, a, dy.len()).iter_mut().zip(dy).zip(bv).for_each(|((o, d), y)| *o += d * y);
                acc(g, b, dy.len()).iter_mut().zip(dy).zip(av).for_each(|((o, d), x)| *o += d * x);
            }
            &Op::Div(a, b) => {
                let (av, bv) = (&val(a).data, &val(b).data);
                acc(g, a, dy.len()).iter_mut().zip(dy).zip(bv).for_each(|((o, d), y)| *o += d / y);
                let gb = acc(g, b, dy.len());
                for j in 0..dy.len() {
                    gb[j] -= dy[j] * av[j] / (bv[j] * bv[j]);
                }
            }
            &Op::AddAxis { x, b, axis } => {
                add_into(acc(g, x, dy.len()), dy, 1.0);
                let (o, n, inner) = axis_split(&val(x).shape, axis);
                let gb = acc(g, b, n);
                for oi in 0..o {
                    for j in 0..n {
                        gb[j] += dy[(oi * n + j) * inner..(oi * n + j + 1) * inner].iter().sum::<f64>();
                    }
                }
            }
            &Op::MulAxis { x, g: gv, axis } => {
                let (o, n, inner) = axis_split(&val(x).shape, axis);
                let (xv, gvv) = (&val(x).data, &val(gv).data);
                {
                    let gx = acc(g, x, dy.len());
                    for oi in 0..o {
                        for j in 0..n {
                            for q in (oi * n + j) * inner..(oi * n + j + 1) * inner {
                                gx[q] += dy[q] * gvv[j];
                            }
                        }
                    }
                }
                let gg = acc(g, gv, n);
                for oi in 0..o {
                    for j in 0..n {
                        let r = (oi * n + j) * inner..(oi * n + j + 1) * inner;
                        gg[j] += dy[r.clone()].iter().zip(&xv[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            &Op::Scale(x, c) => add_into(acc(g, x, dy.len()), dy, c),
            &Op::AddScalar(x) => add_into(acc(g, x, dy.len()), dy, 1.0),
            &Op::Unary(x, u) => {
                let (xv, yv) = (&val(x).data, &node.value.data);
                let gx = acc(g, x, dy.len());
                for j in 0..dy.len() {
                    gx[j] += dy[j] * u.deriv(xv[j], yv[j]);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(&node.value.shape, *axis);
                let mut off = 0;
                for o in 0..outer {
                    for &p in parts {
                        let chunk = val(p).shape[*axis] * inner;
                        let gp = acc(g, p, val(p).len());
                        add_into(&mut gp[o * chunk..(o + 1) * chunk], &dy[off..off + chunk], 1.0);
                        off += chunk;
                    }
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(&val(x).shape, axis);
                let len = node.value.shape[axis];
                let gx = acc(g, x, val(x).len());
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    add_into(&mut gx[base..base + len * inner], &dy[o * len * inner..(o + 1) * len * inner], 1.0);
                }
            }
            Op::Gather { x, idx } => {
                let gx = acc(g, *x, val(*x).len());
                for (j, &s) in idx.iter().enumerate() {
                    gx[s] += dy[j];
                }
            }
            &Op::Reshape(x) => add_into(acc(g, x, dy.len()), dy, 1.0),
            &Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = axis_split(&val(x).shape, axis);
                let gx = acc(g, x, val(x).len());
                let inv = 1.0 / n as f64;
                for o in 0..outer {
                    for j in 0..n {
                        let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                        add_into(dst, &dy[o * inner..(o + 1) * inner], inv);
                    }
                }
            }
            &Op::SumAll(x) => {
                let gx = acc(g, x, val(x).len());
                gx.iter_mut().for_each(|v| *v += dy[0]);
            }
            Op::GroupMean { x, groups } => {
                let d = val(*x).len() / val(*x).shape[0].max(1);
                let gx = acc(g, *x, val(*x).len());
                for (gi, grp) in groups.iter().enumerate() {
                    let inv = 1.0 / grp.len() as f64;
                    for &r in grp {
                        add_into(&mut gx[r * d..(r + 1) * d], &dy[gi * d..(gi + 1) * d], inv);
                    }
                }
            }
            Op::GroupStd { x, groups } => {
                let xv = &val(*x).data;
                let d = xv.len() / val(*x).shape[0].max(1);
                let sd = &node.value.data;
                let gx = acc(g, *x, xv.len());
                for (gi, grp) in groups.iter().enumerate() {
                    let n = grp.len() as f64;
                    for c in 0..d {
                        let s = sd[gi * d + c];
                        if s == 0.0 {
                            continue;
                        }
                        let mean = grp.iter().map(|&r| xv[r * d + c]).sum::<f64>() / n;
                        for &r in grp {
                            gx[r * d + c] += dy[gi * d + c] * (xv[r * d + c] - mean) / (n * s);
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                let y = &node.value.data;
                let d = node.value.last_dim();
                let gx = acc(g, x, y.len());
                for r in 0..y.len() / d {
                    let row = r * d..(r + 1) * d;
                    let dot: f64 = y[row.clone()].iter().zip(&dy[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        gx[j] += y[j] * (dy[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value.data;
                let d = node.value.last_dim();
                let gx = acc(g, *x, y.len());
                let df = d as f64;
                for (r, &inv) in inv_std.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let sdy: f64 = dy[row.clone()].iter().sum();
                    let sdyy: f64 = dy[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        gx[j] += inv / df * (df * dy[j] - sdy - y[j] * sdyy);
                    }
                }
            }
            Op::Conv2d { x, w, stride, pad, cols } => {
                let sx = val(*x).shape.clone();
                let sw = &val(*w).shape;
                let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, k) = (sw[0], sw[2]);
                let (oh, ow) = (node.value.shape[2], node.value.shape[3]);
                let (p, ckk) = (oh * ow, cin * k * k);
                let mut dm = vec![0.0; cout * n * p];
                for co in 0..cout {
                    for b in 0..n {
                        dm[co * n * p + b * p..co * n * p + (b + 1) * p]
                            .copy_from_slice(&dy[(b * cout + co) * p..(b * cout + co + 1) * p]);
                    }
                }
                gemm(cout, n * p, ckk, &dm, false, cols, true, acc(g, *w, cout * ckk), true);
                let mut dcols = vec![0.0; ckk * n * p];
                gemm(ckk, cout, n * p, &val(*w).data, true, &dm, false, &mut dcols, false);
                col2im(&dcols, acc(g, *x, n * cin * h * wd), [n, cin, h, wd], k, *stride, *pad, oh, ow);
            }
            &Op::Bilinear { map, coords } => {
                let sm = val(map).shape.clone();
                let (b, h, w, c) = (sm[0], sm[1], sm[2], sm[3]);
                let n = val(coords).shape[1];
                let (mv, cv) = (&val(map).data, &val(coords).data);
                let mut gc = vec![0.0; cv.len()];
                {
                    let gm = acc(g, map, mv.len());
                    for bi in 0..b {
                        for i in 0..n {
                            let (x, y) = (cv[(bi * n + i) * 2], cv[(bi * n + i) * 2 + 1]);
                            let d = &dy[(bi * n + i) * c..(bi * n + i + 1) * c];
                            for (yy, xx, wt) in bilinear_taps(x, y, h, w) {
                                let base = ((bi * h + yy) * w + xx) * c;
                                add_into(&mut gm[base..base + c], d, wt);
                            }
                            let (gx, gy) = bilinear_coord_grad(mv, bi, x, y, h, w, c, d);
                            gc[(bi * n + i) * 2] += gx;
                            gc[(bi * n + i) * 2 + 1] += gy;
                        }
                    }
                }
                add_into(acc(g, coords, cv.len()), &gc, 1.0);
            }
        }
    }
}

fn acc(g: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    g[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += c * s);
}

#[inline]
fn clampi(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [(usize, usize, f64); 4] {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xa, xb) = (clampi(x0 as isize, w), clampi(x0 as isize + 1, w));
    let (ya, yb) = (clampi(y0 as isize, h), clampi(y0 as isize + 1, h));
    [
        (ya, xa, (1.0 - fx) * (1.0 - fy)),
        (ya, xb, fx * (1.0 - fy)),
        (yb, xa, (1.0 - fx) * fy),
        (yb, xb, fx * fy),
    ]
}

#[allow(clippy::too_many_arguments)]
fn bilinear_coord_grad(m: &[f64], bi: usize, x: f64, y: f64, h: usize, w: usize, c: usize, d: &[f64]) -> (f64, f64) {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xa, xb) = (clampi(x0 as isize, w), clampi(x0 as isize + 1, w));
    let (ya, yb) = (clampi(y0 as isize, h), clampi(y0 as isize + 1, h));
    let px = |yy: usize, xx: usize| &m[((bi * h + yy) * w + xx) * c..][..c];
    let (aa, ab, ba, bb) = (px(ya, xa), px(ya, xb), px(yb, xa), px(yb, xb));
    let (mut gx, mut gy) = (0.0, 0.0);
    for j in 0..c {
        gx += d[j] * ((ab[j] - aa[j]) * (1.0 - fy) + (bb[j] - ba[j]) * fy);
        gy += d[j] * ((ba[j] - aa[j]) * (1.0 - fx) + (bb[j] - ab[j]) * fx);
    }
    (gx, gy)
}

/// Columns `[c·k·k, n·oh·ow]` of edge-replicated patches.
fn im2col(x: &[f64], [n, cin, h, w]: [usize; 4], k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<f64> {
    let np = n * oh * ow;
    let mut cols = vec![0.0; cin * k * k * np];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for b in 0..n {
                    let plane = &x[(b * cin + ci) * h * w..][..h * w];
                    for oy in 0..oh {
                        let sy = clampi((oy * stride + ky) as isize - pad as isize, h);
                        let base = b * oh * ow + oy * ow;
                        for ox in 0..ow {
                            let sx = clampi((ox * stride + kx) as isize - pad as isize, w);
                            dst[base + ox] = plane[sy * w + sx];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    gx: &mut [f64],
    [n, cin, h, w]: [usize; 4],
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let np = n * oh * ow;
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * np..(row + 1) * np];
                for b in 0..n {
                    let plane = &mut gx[(b * cin + ci) * h * w..][..h * w];
                    for oy in 0..oh {
                        let sy = clampi((oy * stride + ky) as isize - pad as isize, h);
                        let base = b * oh * ow + oy * ow;
                        for ox in 0..ow {
                            let sx = clampi((ox * stride + kx) as isize - pad as isize, w);
                            plane[sy * w + sx] += src[base + ox];
                        }
                    }
                }
            }
        }
    }
}
