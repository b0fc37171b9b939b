//! Temporal inconsistency between a reference and a distorted video.
//!
//! For every consecutive frame pair the flow of the distorted clip is
//! subtracted from the flow of the reference. The per-pixel norm of that
//! difference is the inconsistency map, which is split into coarse and fine
//! parts with a complementary pair of Gaussian frequency masks and used to
//! highlight frames before feature extraction. Statistics of the vector
//! difference summarise each pair and the whole clip.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{direction_histogram, farneback_flow, flow_magnitude, FarnebackParams, FlowField};
use crate::media::{frame_to_gray, Frame, VideoTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InconsistencyConfig {
    pub flow: FarnebackParams,
    /// Low-pass cutoff as a fraction of the longer frame side.
    pub cutoff_frac: f64,
    /// Weight of the magnitude term in the frame level.
    pub alpha: f64,
    pub bins: usize,
    pub mag_floor: f64,
}

impl Default for InconsistencyConfig {
    fn default() -> Self {
        InconsistencyConfig {
            flow: FarnebackParams::default(),
            cutoff_frac: 0.05,
            alpha: 0.5,
            bins: 16,
            mag_floor: 1e-3,
        }
    }
}

/// Everything measured between one reference/distorted pair.
///
/// All per-pair vectors have `F - 1` entries. `vi_coarse`, `vi_fine` and the
/// levels are empty until filled by [`InconsistencyBundle::decouple`] and
/// [`InconsistencyBundle::levels`]; [`analyze`] fills everything.
#[derive(Debug, Clone, PartialEq)]
pub struct InconsistencyBundle {
    pub h: usize,
    pub w: usize,
    pub delta_flow: Vec<FlowField>,
    pub vi: Vec<Vec<f64>>,
    pub vi_coarse: Vec<Vec<f64>>,
    pub vi_fine: Vec<Vec<f64>>,
    pub frame_levels: Vec<f64>,
    pub video_level: f64,
}

impl InconsistencyBundle {
    pub fn decouple(&mut self, cutoff_frac: f64) -> Result<()> {
        let mask = gaussian_lowpass_mask(self.h, self.w, cutoff_frac)?;
        let (c, f) = decouple(&self.vi, &mask)?;
        self.vi_coarse = c;
        self.vi_fine = f;
        Ok(())
    }

    pub fn levels(&mut self, alpha: f64, bins: usize, mag_floor: f64) -> Result<()> {
        self.frame_levels = self
            .delta_flow
            .iter()
            .map(|d| frame_inconsistency_level(d, alpha, bins, mag_floor))
            .collect::<Result<_>>()?;
        self.video_level = video_inconsistency_level(&self.frame_levels)?;
        Ok(())
    }
}

fn check_aligned(a: &VideoTensor, b: &VideoTensor) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Shape("videos need at least two frames".into()));
    }
    let (ha, wa, _) = a.dims();
    let (hb, wb, _) = b.dims();
    if a.len() != b.len() || (ha, wa) != (hb, wb) {
        return Err(Error::Shape(format!(
            "reference is {}x{ha}x{wa}, distorted is {}x{hb}x{wb}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn pair_flows(v: &[Frame], p: &FarnebackParams) -> Result<Vec<FlowField>> {
    (0..v.len() - 1)
        .into_par_iter()
        .map(|t| farneback_flow(&v[t], &v[t + 1], p))
        .collect()
}

/// Flow difference `OF(ref) - OF(dist)` and its per-pixel norm for every
/// consecutive frame pair, computed on luma.
pub fn temporal_inconsistency(
    v_ref: &VideoTensor,
    v_dist: &VideoTensor,
    p: &FarnebackParams,
) -> Result<InconsistencyBundle> {
    check_aligned(v_ref, v_dist)?;
    p.validate()?;
    let (h, w, _) = v_ref.dims();
    let gray_ref: Vec<Frame> = v_ref.frames.iter().map(frame_to_gray).collect();
    let gray_dist: Vec<Frame> = v_dist.frames.iter().map(frame_to_gray).collect();
    let of_ref = pair_flows(&gray_ref, p)?;
    let of_dist = if gray_ref == gray_dist {
        of_ref.clone()
    } else {
        pair_flows(&gray_dist, p)?
    };
    let delta_flow = of_ref
        .iter()
        .zip(&of_dist)
        .map(|(a, b)| a.difference(b))
        .collect::<Result<Vec<_>>>()?;
    let vi = delta_flow.iter().map(flow_magnitude).collect();
    Ok(InconsistencyBundle {
        h,
        w,
        delta_flow,
        vi,
        vi_coarse: Vec::new(),
        vi_fine: Vec::new(),
        frame_levels: Vec::new(),
        video_level: 0.0,
    })
}

/// Maps, decoupled maps and levels in one pass.
pub fn analyze(v_ref: &VideoTensor, v_dist: &VideoTensor, cfg: &InconsistencyConfig) -> Result<InconsistencyBundle> {
    let mut b = temporal_inconsistency(v_ref, v_dist, &cfg.flow)?;
    b.decouple(cfg.cutoff_frac)?;
    b.levels(cfg.alpha, cfg.bins, cfg.mag_floor)?;
    Ok(b)
}

/// Gaussian low-pass transfer function in FFT-native (unshifted) order.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterMask {
    pub h: usize,
    pub w: usize,
    pub h_low: Vec<f64>,
    /// `D0`, in frequency-index units.
    pub cutoff: f64,
}

/// Signed frequency index of FFT bin `k` on an axis of length `n`.
fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

impl FilterMask {
    /// Mask value at signed frequency `(fy, fx)`.
    pub fn at_frequency(&self, fy: i64, fx: i64) -> f64 {
        let ky = fy.rem_euclid(self.h as i64) as usize;
        let kx = fx.rem_euclid(self.w as i64) as usize;
        self.h_low[ky * self.w + kx]
    }

    pub fn h_high(&self) -> Vec<f64> {
        self.h_low.iter().map(|v| 1.0 - v).collect()
    }
}

pub fn gaussian_lowpass_mask(h: usize, w: usize, cutoff_frac: f64) -> Result<FilterMask> {
    if !(cutoff_frac > 0.0 && cutoff_frac < 0.5) {
        return Err(Error::InvalidParam(format!("cutoff fraction {cutoff_frac} outside (0, 0.5)")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Shape("empty mask".into()));
    }
    let d0 = cutoff_frac * h.max(w) as f64;
    let mut h_low = Vec::with_capacity(h * w);
    for ky in 0..h {
        let fy = signed_freq(ky, h);
        for kx in 0..w {
            let fx = signed_freq(kx, w);
            h_low.push((-(fy * fy + fx * fx) / (2.0 * d0 * d0)).exp());
        }
    }
    Ok(FilterMask { h, w, h_low, cutoff: d0 })
}

struct Fft2d {
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
    rows_inv: Arc<dyn Fft<f64>>,
    cols_inv: Arc<dyn Fft<f64>>,
    h: usize,
    w: usize,
}

impl Fft2d {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2d {
            rows: planner.plan_fft_forward(w),
            cols: planner.plan_fft_forward(h),
            rows_inv: planner.plan_fft_inverse(w),
            cols_inv: planner.plan_fft_inverse(h),
            h,
            w,
        }
    }

    fn run(&self, buf: &mut [Complex<f64>], inverse: bool) {
        let (rows, cols) = if inverse {
            (&self.rows_inv, &self.cols_inv)
        } else {
            (&self.rows, &self.cols)
        };
        rows.process(buf);
        let mut col = vec![Complex::new(0.0, 0.0); self.h];
        for x in 0..self.w {
            for y in 0..self.h {
                col[y] = buf[y * self.w + x];
            }
            cols.process(&mut col);
            for y in 0..self.h {
                buf[y * self.w + x] = col[y];
            }
        }
    }

    /// Real part of `IFFT(mask · FFT(map))` for both the mask and its
    /// complement.
    fn split(&self, map: &[f64], mask: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut spec: Vec<Complex<f64>> = map.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.run(&mut spec, false);
        let mut low: Vec<Complex<f64>> = spec.iter().zip(mask).map(|(s, &m)| s * m).collect();
        let mut high: Vec<Complex<f64>> = spec.iter().zip(mask).map(|(s, &m)| s * (1.0 - m)).collect();
        self.run(&mut low, true);
        self.run(&mut high, true);
        let norm = 1.0 / (self.h * self.w) as f64;
        (
            low.iter().map(|c| c.re * norm).collect(),
            high.iter().map(|c| c.re * norm).collect(),
        )
    }
}

/// Splits each map into low-pass (coarse) and high-pass (fine) parts.
pub fn decouple(maps: &[Vec<f64>], mask: &FilterMask) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n = mask.h * mask.w;
    if let Some(bad) = maps.iter().find(|m| m.len() != n) {
        return Err(Error::Shape(format!(
            "map has {} values, mask is {}x{}",
            bad.len(),
            mask.h,
            mask.w
        )));
    }
    let fft = Fft2d::new(mask.h, mask.w);
    let parts: Vec<(Vec<f64>, Vec<f64>)> = maps.iter().map(|m| fft.split(m, &mask.h_low)).collect();
    Ok(parts.into_iter().unzip())
}

/// Weights frames by their min-max normalised inconsistency map.
///
/// Normalisation is joint over all maps of the clip; a constant set of maps
/// gives zero weights. The last frame reuses the last map. If any weighted
/// sample exceeds 1 the whole clip is divided by its maximum.
pub fn highlight(v_dist: &VideoTensor, maps: &[Vec<f64>]) -> Result<VideoTensor> {
    let (h, w, c) = v_dist.dims();
    if maps.len() + 1 != v_dist.len() {
        return Err(Error::Shape(format!(
            "{} maps for {} frames",
            maps.len(),
            v_dist.len()
        )));
    }
    if maps.iter().any(|m| m.len() != h * w) {
        return Err(Error::Shape(format!("map size differs from {h}x{w} frames")));
    }
    let lo = maps.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = maps.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut frames: Vec<Frame> = v_dist
        .frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let map = &maps[t.min(maps.len() - 1)];
            let mut out = f.clone();
            if span > 0.0 {
                for (i, px) in out.data.chunks_exact_mut(c).enumerate() {
                    let wgt = (map[i] - lo) / span;
                    px.iter_mut().for_each(|v| *v += wgt * *v);
                }
            }
            out
        })
        .collect();
    let peak = frames.iter().flat_map(|f| f.data.iter()).copied().fold(0.0, f64::max);
    if peak > 1.0 {
        for f in frames.iter_mut() {
            f.data.iter_mut().for_each(|v| *v = (*v / peak).min(1.0));
        }
    }
    Ok(VideoTensor {
        frames,
        source_depth: v_dist.source_depth,
        fps: v_dist.fps,
    })
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `alpha·σ(|ΔOF|) + (1 − alpha)·σ(direction histogram)` over every pixel,
/// with population standard deviations.
pub fn frame_inconsistency_level(delta: &FlowField, alpha: f64, bins: usize, mag_floor: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParam(format!("alpha {alpha} outside [0, 1]")));
    }
    if bins < 2 {
        return Err(Error::InvalidParam("direction histogram needs at least two bins".into()));
    }
    let (_, sd_mag) = mean_std(&flow_magnitude(delta));
    let (_, sd_hist) = mean_std(&direction_histogram(delta, bins, mag_floor));
    Ok(alpha * sd_mag + (1.0 - alpha) * sd_hist)
}

/// Mean plus population standard deviation of the frame levels.
pub fn video_inconsistency_level(frame_levels: &[f64]) -> Result<f64> {
    if frame_levels.is_empty() {
        return Err(Error::InvalidParam("no frame levels".into()));
    }
    let (m, s) = mean_std(frame_levels);
    Ok(m + s)
}

/// Range of video levels observed on a training split, frozen for inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub min: f64,
    pub max: f64,
}

impl LevelStats {
    pub fn from_levels(levels: &[f64]) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidParam("no video levels".into()));
        }
        Ok(LevelStats {
            min: levels.iter().copied().fold(f64::INFINITY, f64::min),
            max: levels.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// `tau − eta·minmax(level)`, with the level clamped into the dataset range.
pub fn memory_threshold(video_level: f64, dataset_min: f64, dataset_max: f64, tau: f64, eta: f64) -> f64 {
    let span = dataset_max - dataset_min;
    if !(span > 0.0) {
        return tau;
    }
    let c = video_level.clamp(dataset_min, dataset_max);
    tau - eta * (c - dataset_min) / span
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::warp_translate;

    fn textured(h: usize, w: usize) -> Frame {
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                0.5 + 0.2 * (0.45 * x + 0.2 * y).sin() + 0.15 * (0.3 * y - 0.5 * x).cos()
            })
            .collect();
        Frame::new(h, w, 1, data)
    }

    #[test]
    fn identical_videos_are_consistent() {
        let f = textured(32, 32);
        let v = VideoTensor::new(vec![f.clone(), warp_translate(&f, 0.7, 0.2), f], 25.0).unwrap();
        let b = analyze(&v, &v, &InconsistencyConfig::default()).unwrap();
        assert!(b.vi.iter().flatten().all(|&x| x == 0.0));
        assert!(b.frame_levels.iter().all(|&x| x == 0.0));
        assert_eq!(b.video_level, 0.0);
    }

    #[test]
    fn jittered_pairs_light_up() {
        let f = textured(48, 48);
        let reference = VideoTensor::new(vec![f.clone(); 4], 25.0).unwrap();
        let shifted = warp_translate(&f, 1.0, 0.0);
        let dist = VideoTensor::new(vec![f.clone(), shifted.clone(), shifted, f], 25.0).unwrap();
        let b = temporal_inconsistency(&reference, &dist, &FarnebackParams::default()).unwrap();
        let med = |m: &Vec<f64>, valid: &[bool]| {
            let mut v: Vec<f64> = m.iter().zip(valid).filter(|p| *p.1).map(|p| *p.0).collect();
            crate::flow::median(&mut v)
        };
        assert!((med(&b.vi[0], &b.delta_flow[0].valid) - 1.0).abs() < 0.3);
        assert!(med(&b.vi[1], &b.delta_flow[1].valid) < 0.05);
        assert!((med(&b.vi[2], &b.delta_flow[2].valid) - 1.0).abs() < 0.3);

        let swapped = temporal_inconsistency(&dist, &reference, &FarnebackParams::default()).unwrap();
        assert_eq!(swapped.vi, b.vi);
    }

    #[test]
    fn mask_values() {
        let m = gaussian_lowpass_mask(40, 30, 0.05).unwrap();
        assert_eq!(m.cutoff, 2.0);
        assert_eq!(m.at_frequency(0, 0), 1.0);
        assert!((m.at_frequency(0, 2) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((m.at_frequency(-2, 0) - (-0.5f64).exp()).abs() < 1e-12);
        for (fy, fx) in [(3, -4), (7, 1), (-11, 9)] {
            assert_eq!(m.at_frequency(fy, fx), m.at_frequency(-fy, -fx));
        }
        assert!(gaussian_lowpass_mask(8, 8, 0.5).is_err());
    }

    #[test]
    fn decouple_cases() {
        let mask = gaussian_lowpass_mask(16, 16, 0.05).unwrap();
        let (c, f) = decouple(&[vec![0.75; 256]], &mask).unwrap();
        assert!(c[0].iter().all(|v| (v - 0.75).abs() < 1e-10));
        assert!(f[0].iter().all(|v| v.abs() < 1e-10));

        let checker: Vec<f64> = (0..256).map(|i| ((i / 16 + i % 16) % 2) as f64).collect();
        let (c, f) = decouple(&[checker.clone()], &mask).unwrap();
        let energy = |m: &[f64], mean: f64| m.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        // DC goes to the coarse part; compare the oscillating energy
        assert!(energy(&f[0], 0.0) >= energy(&c[0], 0.5));
        for i in 0..256 {
            assert!((c[0][i] + f[0][i] - checker[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn highlight_cases() {
        let f = textured(6, 5);
        let v = VideoTensor::new(vec![f.clone(), f.clone(), f], 25.0).unwrap();
        let zeros = vec![vec![0.0; 30]; 2];
        assert_eq!(highlight(&v, &zeros).unwrap(), v);

        let dim = Frame::filled(2, 2, 3, 0.25);
        let v = VideoTensor::new(vec![dim.clone(), dim], 25.0).unwrap();
        let out = highlight(&v, &[vec![0.0, 1.0, 0.0, 0.5]]).unwrap();
        assert_eq!(out.frames[0].at(0, 1, 2), 0.5);
        assert_eq!(out.frames[0].at(1, 1, 0), 0.375);
        assert_eq!(out.frames[1].at(0, 0, 0), 0.25);
        assert!(highlight(&v, &[vec![0.0; 3]]).is_err());
    }

    #[test]
    fn frame_level_cases() {
        assert_eq!(frame_inconsistency_level(&FlowField::zeros(5, 5), 0.5, 16, 1e-3).unwrap(), 0.0);
        let c = frame_inconsistency_level(&FlowField::uniform(5, 5, 3.0, 4.0), 0.5, 16, 1e-3).unwrap();
        assert!((c - 0.5 * 15f64.sqrt() / 16.0).abs() < 1e-12);

        let mut f = FlowField::uniform(4, 4, 1.0, 0.0);
        f.set(0, 0, 2.0, 0.0);
        let a = frame_inconsistency_level(&f, 1.0, 16, 1e-3).unwrap();
        for v in f.vectors.chunks_exact_mut(2) {
            let (r, th) = (v[0].hypot(v[1]), 1.234f64);
            v[0] = r * th.cos();
            v[1] = r * th.sin();
        }
        assert!((frame_inconsistency_level(&f, 1.0, 16, 1e-3).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn video_level_cases() {
        assert_eq!(video_inconsistency_level(&[0.3; 5]).unwrap(), 0.3);
        assert_eq!(video_inconsistency_level(&[0.0, 2.0]).unwrap(), 2.0);
        let a = video_inconsistency_level(&[0.1, 0.7, 0.4]).unwrap();
        let b = video_inconsistency_level(&[0.3, 2.1, 1.2]).unwrap();
        assert!((b - 3.0 * a).abs() < 1e-12);
        assert!(video_inconsistency_level(&[]).is_err());
    }

    #[test]
    fn threshold_cases() {
        assert_eq!(memory_threshold(0.2, 0.2, 1.0, 5.0, 4.0), 5.0);
        assert_eq!(memory_threshold(1.0, 0.2, 1.0, 5.0, 4.0), 1.0);
        assert_eq!(memory_threshold(0.6, 0.2, 1.0, 5.0, 4.0), 3.0);
        assert_eq!(memory_threshold(9.0, 0.2, 1.0, 5.0, 4.0), 1.0);
        assert_eq!(memory_threshold(0.5, 0.5, 0.5, 5.0, 4.0), 5.0);
    }
}
