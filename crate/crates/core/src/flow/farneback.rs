//! Two-frame motion estimation by polynomial expansion (Farnebäck 2003).
//!
//! Every pixel neighbourhood is approximated by a quadratic
//! `f(x) ≈ xᵀAx + bᵀx + c`, fitted by Gaussian-weighted least squares. A
//! displacement `d` between two expansions satisfies `A d = -½ (b₂ - b₁)`;
//! the system is averaged over a box window and solved per pixel, repeatedly,
//! coarse-to-fine over a pyramid.

use serde::{Deserialize, Serialize};

use super::FlowField;
use crate::error::{Error, Result};
use crate::media::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FarnebackParams {
    pub pyramid_levels: usize,
    pub pyramid_scale: f64,
    pub window_size: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
    /// Estimates are clamped to `±max_displacement` per component.
    pub max_displacement: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        FarnebackParams {
            pyramid_levels: 3,
            pyramid_scale: 0.5,
            window_size: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
            max_displacement: 32.0,
        }
    }
}

impl FarnebackParams {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels < 1 {
            return Err(Error::InvalidParam("pyramid_levels must be >= 1".into()));
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::InvalidParam("pyramid_scale must lie in (0,1)".into()));
        }
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return Err(Error::InvalidParam("window_size must be odd and >= 3".into()));
        }
        if self.poly_n < 1 || self.poly_n % 2 == 0 {
            return Err(Error::InvalidParam("poly_n must be odd".into()));
        }
        if self.poly_sigma <= 0.0 || self.iterations == 0 {
            return Err(Error::InvalidParam("poly_sigma and iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Smallest pyramid level side that is still processed.
const MIN_LEVEL_SIDE: usize = 16;

/// Plain single-channel image used inside the estimator.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    #[inline]
    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

#[inline]
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn convolve_rows(p: &Plane, kernel: &[f64]) -> Plane {
    let r = kernel.len() / 2;
    let mut out = vec![0.0; p.data.len()];
    let mut padded = vec![0.0; p.w + 2 * r];
    for y in 0..p.h {
        let row = &p.data[y * p.w..(y + 1) * p.w];
        for (i, v) in padded.iter_mut().enumerate() {
            *v = row[reflect101(i as isize - r as isize, p.w)];
        }
        let dst = &mut out[y * p.w..(y + 1) * p.w];
        for (d, win) in dst.iter_mut().zip(padded.windows(kernel.len())) {
            *d = win.iter().zip(kernel).map(|(a, b)| a * b).sum();
        }
    }
    Plane { h: p.h, w: p.w, data: out }
}

fn convolve_cols(p: &Plane, kernel: &[f64]) -> Plane {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; p.data.len()];
    for y in 0..p.h {
        for (k, &kv) in kernel.iter().enumerate() {
            let src = reflect101(y as isize + k as isize - r, p.h);
            let src_row = &p.data[src * p.w..(src + 1) * p.w];
            let dst = &mut out[y * p.w..(y + 1) * p.w];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    Plane { h: p.h, w: p.w, data: out }
}

fn gaussian_blur(p: &Plane, sigma: f64) -> Plane {
    let radius = ((sigma * 3.0).ceil() as usize).max(1);
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let t = i as f64 - radius as f64;
            (-t * t / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    convolve_cols(&convolve_rows(p, &k), &k)
}

fn box_blur(p: &Plane, size: usize) -> Plane {
    let k = vec![1.0 / size as f64; size];
    convolve_cols(&convolve_rows(p, &k), &k)
}

fn resize_plane(p: &Plane, h: usize, w: usize) -> Plane {
    let sy = p.h as f64 / h as f64;
    let sx = p.w as f64 / w as f64;
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        let srcy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (p.h - 1) as f64);
        let y0 = srcy.floor() as usize;
        let y1 = (y0 + 1).min(p.h - 1);
        let fy = srcy - y0 as f64;
        for x in 0..w {
            let srcx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (p.w - 1) as f64);
            let x0 = srcx.floor() as usize;
            let x1 = (x0 + 1).min(p.w - 1);
            let fx = srcx - x0 as f64;
            let top = p.at(y0, x0) * (1.0 - fx) + p.at(y0, x1) * fx;
            let bot = p.at(y1, x0) * (1.0 - fx) + p.at(y1, x1) * fx;
            data[y * w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    Plane { h, w, data }
}

/// Solves a small dense system by Gauss-Jordan elimination with partial
/// pivoting, returning the inverse.
fn invert6(m: [[f64; 6]; 6]) -> [[f64; 6]; 6] {
    let mut a = m;
    let mut inv = [[0.0; 6]; 6];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..6 {
        let pivot = (col..6)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        for k in 0..6 {
            a[col][k] /= p;
            inv[col][k] /= p;
        }
        for r in 0..6 {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for k in 0..6 {
                        a[r][k] -= f * a[col][k];
                        inv[r][k] -= f * inv[col][k];
                    }
                }
            }
        }
    }
    inv
}

/// Polynomial expansion coefficients per pixel: `[b_x, b_y, a_xx, a_yy, a_xy]`
/// where `a_xy` multiplies `x·y` (so the off-diagonal of A is `a_xy / 2`).
fn poly_expand(img: &Plane, n: usize, sigma: f64) -> Vec<[f64; 5]> {
    let offsets: Vec<f64> = (0..=2 * n).map(|i| i as f64 - n as f64).collect();
    let g: Vec<f64> = offsets.iter().map(|t| (-t * t / (2.0 * sigma * sigma)).exp()).collect();
    let gx: Vec<f64> = g.iter().zip(&offsets).map(|(g, t)| g * t).collect();
    let gxx: Vec<f64> = g.iter().zip(&offsets).map(|(g, t)| g * t * t).collect();

    // Gram matrix of the basis [1, x, y, x², y², xy] under the separable weight.
    let basis = |x: f64, y: f64| [1.0, x, y, x * x, y * y, x * y];
    let mut gram = [[0.0; 6]; 6];
    for (iy, &ty) in offsets.iter().enumerate() {
        for (ix, &tx) in offsets.iter().enumerate() {
            let wgt = g[iy] * g[ix];
            let phi = basis(tx, ty);
            for r in 0..6 {
                for c in 0..6 {
                    gram[r][c] += wgt * phi[r] * phi[c];
                }
            }
        }
    }
    let ginv = invert6(gram);

    let v0 = convolve_cols(img, &g);
    let v1 = convolve_cols(img, &gx);
    let v2 = convolve_cols(img, &gxx);
    let m1 = convolve_rows(&v0, &g);
    let mx = convolve_rows(&v0, &gx);
    let mxx = convolve_rows(&v0, &gxx);
    let my = convolve_rows(&v1, &g);
    let mxy = convolve_rows(&v1, &gx);
    let myy = convolve_rows(&v2, &g);

    (0..img.data.len())
        .map(|i| {
            let m = [m1.data[i], mx.data[i], my.data[i], mxx.data[i], myy.data[i], mxy.data[i]];
            let mut r = [0.0; 6];
            for (row, out) in ginv.iter().zip(r.iter_mut()) {
                *out = row.iter().zip(&m).map(|(a, b)| a * b).sum();
            }
            [r[1], r[2], r[3], r[4], r[5]]
        })
        .collect()
}

/// Edge attenuation applied to the normal equations near the frame border.
fn border_weight(i: usize, n: usize) -> f64 {
    const RAMP: [f64; 5] = [0.14, 0.14, 0.4472, 0.4472, 0.4472];
    let d = i.min(n - 1 - i);
    RAMP.get(d).copied().unwrap_or(1.0)
}

/// Per-pixel normal-equation terms `[G11, G12, G22, h1, h2]`.
fn update_matrices(r0: &[[f64; 5]], r1: &[[f64; 5]], flow: &[f64], h: usize, w: usize) -> Vec<[f64; 5]> {
    let mut m = vec![[0.0; 5]; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx, dy) = (flow[2 * i], flow[2 * i + 1]);
            let fx = x as f64 + dx;
            let fy = y as f64 + dy;
            let x1 = fx.floor();
            let y1 = fy.floor();
            let c0 = r0[i];
            let (mut bx, mut by, axx, ayy, axy);
            if x1 >= 0.0 && y1 >= 0.0 && (x1 as usize) < w - 1 && (y1 as usize) < h - 1 {
                let (xi, yi) = (x1 as usize, y1 as usize);
                let (ax, ay) = (fx - x1, fy - y1);
                let wts = [(1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay];
                let idx = [yi * w + xi, yi * w + xi + 1, (yi + 1) * w + xi, (yi + 1) * w + xi + 1];
                let mut s = [0.0; 5];
                for (k, &j) in idx.iter().enumerate() {
                    for c in 0..5 {
                        s[c] += wts[k] * r1[j][c];
                    }
                }
                axx = 0.5 * (c0[2] + s[2]);
                ayy = 0.5 * (c0[3] + s[3]);
                axy = 0.25 * (c0[4] + s[4]);
                bx = 0.5 * (c0[0] - s[0]);
                by = 0.5 * (c0[1] - s[1]);
            } else {
                axx = c0[2];
                ayy = c0[3];
                axy = 0.5 * c0[4];
                bx = 0.0;
                by = 0.0;
            }
            bx += axx * dx + axy * dy;
            by += axy * dx + ayy * dy;
            let s = border_weight(x, w) * border_weight(y, h);
            let (axx, ayy, axy, bx, by) = (axx * s, ayy * s, axy * s, bx * s, by * s);
            m[i] = [
                axx * axx + axy * axy,
                (axx + ayy) * axy,
                ayy * ayy + axy * axy,
                axx * bx + axy * by,
                axy * bx + ayy * by,
            ];
        }
    }
    m
}

fn solve_flow(m: &[[f64; 5]], flow: &mut [f64], limit: f64) {
    for (i, t) in m.iter().enumerate() {
        let [g11, g12, g22, h1, h2] = *t;
        let idet = 1.0 / (g11 * g22 - g12 * g12 + 1e-3);
        flow[2 * i] = ((g22 * h1 - g12 * h2) * idet).clamp(-limit, limit);
        flow[2 * i + 1] = ((g11 * h2 - g12 * h1) * idet).clamp(-limit, limit);
    }
}

fn blur_terms(m: &[[f64; 5]], h: usize, w: usize, win: usize) -> Vec<[f64; 5]> {
    let mut out = vec![[0.0; 5]; h * w];
    for c in 0..5 {
        let p = Plane { h, w, data: m.iter().map(|t| t[c]).collect() };
        let b = box_blur(&p, win);
        for (o, v) in out.iter_mut().zip(b.data) {
            o[c] = v;
        }
    }
    out
}

fn gray_plane(f: &Frame) -> Result<Plane> {
    if f.c != 1 {
        return Err(Error::Shape(format!("flow expects luma frames, got {} channels", f.c)));
    }
    // Estimation runs on the 8-bit intensity scale so the solver's
    // regulariser keeps its classical meaning.
    Ok(Plane { h: f.h, w: f.w, data: f.data.iter().map(|v| v * 255.0).collect() })
}

/// Dense flow from `prev` to `next`: content at `p` in `prev` is found at
/// `p + flow(p)` in `next`.
pub fn farneback_flow(prev: &Frame, next: &Frame, p: &FarnebackParams) -> Result<FlowField> {
    p.validate()?;
    if (prev.h, prev.w) != (next.h, next.w) {
        return Err(Error::Shape(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            prev.h, prev.w, next.h, next.w
        )));
    }
    let (h, w) = (prev.h, prev.w);
    if h < 2 * p.poly_n || w < 2 * p.poly_n {
        return Err(Error::InvalidParam(format!(
            "{h}x{w} frame is smaller than 2*poly_n = {}",
            2 * p.poly_n
        )));
    }
    let img0 = gray_plane(prev)?;
    let img1 = gray_plane(next)?;

    let mut flow: Option<(usize, usize, Vec<f64>)> = None;
    for level in (0..p.pyramid_levels).rev() {
        let scale = p.pyramid_scale.powi(level as i32);
        let lh = (h as f64 * scale).round() as usize;
        let lw = (w as f64 * scale).round() as usize;
        if level > 0 && (lh < MIN_LEVEL_SIDE.max(2 * p.poly_n) || lw < MIN_LEVEL_SIDE.max(2 * p.poly_n)) {
            continue;
        }
        let (l0, l1) = if level == 0 {
            (img0.clone(), img1.clone())
        } else {
            let sigma = (1.0 / scale - 1.0) * 0.5;
            (
                resize_plane(&gaussian_blur(&img0, sigma), lh, lw),
                resize_plane(&gaussian_blur(&img1, sigma), lh, lw),
            )
        };
        let mut cur = match flow.take() {
            None => vec![0.0; 2 * lh * lw],
            Some((ph, pw, prev_flow)) => {
                let up_x = lw as f64 / pw as f64;
                let up_y = lh as f64 / ph as f64;
                let fx = Plane { h: ph, w: pw, data: prev_flow.iter().step_by(2).copied().collect() };
                let fy = Plane { h: ph, w: pw, data: prev_flow.iter().skip(1).step_by(2).copied().collect() };
                let rx = resize_plane(&fx, lh, lw);
                let ry = resize_plane(&fy, lh, lw);
                let mut v = vec![0.0; 2 * lh * lw];
                for i in 0..lh * lw {
                    v[2 * i] = rx.data[i] * up_x;
                    v[2 * i + 1] = ry.data[i] * up_y;
                }
                v
            }
        };
        let r0 = poly_expand(&l0, p.poly_n, p.poly_sigma);
        let r1 = poly_expand(&l1, p.poly_n, p.poly_sigma);
        let limit = p.max_displacement * scale;
        for _ in 0..p.iterations {
            let m = update_matrices(&r0, &r1, &cur, lh, lw);
            let mb = blur_terms(&m, lh, lw, p.window_size);
            solve_flow(&mb, &mut cur, limit);
        }
        flow = Some((lh, lw, cur));
    }

    let (_, _, vectors) = flow.expect("level 0 is always processed");
    let border = p.poly_n;
    let valid = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            y >= border && x >= border && y + border < h && x + border < w
        })
        .collect();
    Ok(FlowField { h, w, vectors, valid })
}
