//! Dense optical flow between consecutive luma frames.
//!
//! [`farneback_flow`] is the production engine; [`block_match_flow`] is an
//! exhaustive integer search used as an oracle and fallback.

mod block_match;
mod farneback;

use std::fs;
use std::path::Path;
use std::f64::consts::TAU;

pub use block_match::block_match_flow;
pub use farneback::{farneback_flow, FarnebackParams};

use crate::error::{Error, Result};

/// Per-pixel displacement `(dx, dy)` in pixels/frame, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub vectors: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            h,
            w,
            vectors: vec![0.0; 2 * h * w],
            valid: vec![true; h * w],
        }
    }

    pub fn uniform(h: usize, w: usize, dx: f64, dy: f64) -> Self {
        let mut f = FlowField::zeros(h, w);
        for v in f.vectors.chunks_exact_mut(2) {
            v[0] = dx;
            v[1] = dy;
        }
        f
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        let i = 2 * (y * self.w + x);
        (self.vectors[i], self.vectors[i + 1])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, dx: f64, dy: f64) {
        let i = 2 * (y * self.w + x);
        self.vectors[i] = dx;
        self.vectors[i + 1] = dy;
    }

    /// `self - other`, valid where both are valid.
    pub fn difference(&self, other: &FlowField) -> Result<FlowField> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::Shape(format!(
                "flow {}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(FlowField {
            h: self.h,
            w: self.w,
            vectors: self.vectors.iter().zip(&other.vectors).map(|(a, b)| a - b).collect(),
            valid: self.valid.iter().zip(&other.valid).map(|(a, b)| *a && *b).collect(),
        })
    }

    /// Median of each component over the valid mask.
    pub fn valid_median(&self) -> (f64, f64) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (v, &ok) in self.vectors.chunks_exact(2).zip(&self.valid) {
            if ok {
                xs.push(v[0]);
                ys.push(v[1]);
            }
        }
        (median(&mut xs), median(&mut ys))
    }

    /// Dumps `u32 H, u32 W` (little-endian) followed by float32 dx and dy planes.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(8 + 8 * self.h * self.w);
        out.extend_from_slice(&(self.h as u32).to_le_bytes());
        out.extend_from_slice(&(self.w as u32).to_le_bytes());
        for comp in 0..2 {
            for v in self.vectors.chunks_exact(2) {
                out.extend_from_slice(&(v[comp] as f32).to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_dump(path: &Path) -> Result<FlowField> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 {
            return Err(Error::Format("flow dump too short".into()));
        }
        let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + 8 * h * w {
            return Err(Error::Format("flow dump size mismatch".into()));
        }
        let floats: Vec<f64> = bytes[8..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let mut f = FlowField::zeros(h, w);
        for i in 0..h * w {
            f.vectors[2 * i] = floats[i];
            f.vectors[2 * i + 1] = floats[h * w + i];
        }
        Ok(f)
    }
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn flow_magnitude(f: &FlowField) -> Vec<f64> {
    f.vectors.chunks_exact(2).map(|v| v[0].hypot(v[1])).collect()
}

/// Normalised histogram of flow angles over `[0, 2π)`.
///
/// Pixels below `mag_floor` are ignored. When every pixel is ignored the
/// histogram is uniform.
pub fn direction_histogram(f: &FlowField, bins: usize, mag_floor: f64) -> Vec<f64> {
    assert!(bins >= 2, "direction histogram needs at least two bins");
    let mut hist = vec![0.0; bins];
    let width = TAU / bins as f64;
    let mut count = 0usize;
    for v in f.vectors.chunks_exact(2) {
        if v[0].hypot(v[1]) < mag_floor {
            continue;
        }
        let mut angle = v[1].atan2(v[0]);
        if angle < 0.0 {
            angle += TAU;
        }
        let bin = ((angle / width) as usize).min(bins - 1);
        hist[bin] += 1.0;
        count += 1;
    }
    if count == 0 {
        return vec![1.0 / bins as f64; bins];
    }
    hist.iter_mut().for_each(|h| *h /= count as f64);
    hist
}
