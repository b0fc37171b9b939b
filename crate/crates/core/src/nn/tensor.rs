use crate::error::{Error, Result};

/// Dense row-major `f64` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Tensor::new(shape, data).expect("tensor shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Row `i` of a tensor viewed as `[len / last_dim, last_dim]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }
}

/// `(outer, axis_len, inner)` split of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `C (+)= A·B` for row-major `A: m×k`, `B: k×n`, with optional transposes
/// expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, a, (rsa as usize, csa as usize), b, (rsb as usize, csb as usize), c, accumulate);
        return;
    }
    // SAFETY: slice lengths cover the strided extents checked by the callers:
    // a has m*k, b has k*n and c has m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Below this many multiply-adds, packing in the blocked kernel costs more
/// than it saves.
const SMALL_GEMM: usize = 1 << 15;

#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if !accumulate {
        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
    }
    if csa == 1 && rsb == 1 {
        // A row-major and B stored transposed: both operands are contiguous
        // along k.
        for i in 0..m {
            let arow = &a[i * rsa..i * rsa + k];
            for (j, o) in c[i * n..(i + 1) * n].iter_mut().enumerate() {
                let bcol = &b[j * csb..j * csb + k];
                *o += arow.iter().zip(bcol).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        return;
    }
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * rsa + p * csa];
            if csb == 1 {
                let brow = &b[p * rsb..p * rsb + n];
                row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aip * bv);
            } else {
                row.iter_mut().enumerate().for_each(|(j, o)| *o += aip * b[p * rsb + j * csb]);
            }
        }
    }
}
