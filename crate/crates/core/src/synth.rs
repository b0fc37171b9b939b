//! Synthetic reference/distorted clip pairs with controlled temporal jitter.
//!
//! A reference clip is a textured pattern drifting smoothly across the frame.
//! The distorted clip warps every reference frame by an independent random
//! displacement field of amplitude `jitter_amp`: a global offset plus a
//! smooth sinusoidal ripple, so the flow difference between the two is known
//! by construction and varies across the frame. Quality labels fall linearly
//! with amplitude.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{save_video, Frame, VideoFormat, VideoTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Checker,
    GradientDrift,
    NoiseTexture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub pattern: Pattern,
    pub jitter_amp: f64,
    pub flicker_amp: f64,
    pub seed: u64,
    /// Amplitude that maps to a quality label of 0.
    pub amp_max: f64,
    /// Largest per-axis speed of the reference pattern, px per frame.
    pub drift_max: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_clips: 100,
            frames: 16,
            h: 48,
            w: 48,
            pattern: Pattern::GradientDrift,
            jitter_amp: 0.0,
            flicker_amp: 0.0,
            seed: 0,
            amp_max: 4.0,
            drift_max: 0.6,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 4 {
            return Err(Error::InvalidParam("synthetic clips need at least 4 frames".into()));
        }
        if self.jitter_amp < 0.0 || self.flicker_amp < 0.0 || self.drift_max < 0.0 {
            return Err(Error::InvalidParam("amplitudes must be non-negative".into()));
        }
        if self.amp_max <= 0.0 {
            return Err(Error::InvalidParam("amp_max must be positive".into()));
        }
        if self.h < 8 || self.w < 8 {
            return Err(Error::InvalidParam("frames must be at least 8x8".into()));
        }
        Ok(())
    }

    pub fn mos_for(&self, amp: f64) -> f64 {
        (1.0 - amp / self.amp_max).clamp(0.0, 1.0)
    }
}

/// A reference/distorted pair with its normalised quality label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub id: String,
    /// Clips generated from the same reference content share this id.
    pub content: usize,
    pub reference: VideoTensor,
    pub distorted: VideoTensor,
    pub mos: f64,
    pub amp: f64,
}

/// Seeded, continuous-coordinate texture.
#[derive(Debug, Clone)]
pub struct PatternField {
    kind: Pattern,
    waves: Vec<(f64, f64, f64, f64)>,
    square: f64,
    ramp: (f64, f64),
    base: f64,
    h: f64,
    w: f64,
}

impl PatternField {
    pub fn new(kind: Pattern, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let n_waves = match kind {
            Pattern::Checker => 0,
            Pattern::GradientDrift => 3,
            Pattern::NoiseTexture => 6,
        };
        let amp = match kind {
            Pattern::NoiseTexture => 0.07,
            _ => 0.06,
        };
        let waves = (0..n_waves)
            .map(|_| {
                let period: f64 = rng.gen_range(7.0..18.0);
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / period;
                (k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..std::f64::consts::TAU), amp)
            })
            .collect();
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let slope = rng.gen_range(0.45..0.7) / h.max(w) as f64;
        PatternField {
            kind,
            waves,
            square: rng.gen_range(6.0..10.0),
            ramp: (slope * theta.cos(), slope * theta.sin()),
            base: rng.gen_range(0.4..0.6),
            h: h as f64,
            w: w as f64,
        }
    }

    fn point(&self, x: f64, y: f64) -> f64 {
        let waves: f64 = self.waves.iter().map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin()).sum();
        match self.kind {
            Pattern::Checker => unreachable!("checkers are sampled by area"),
            Pattern::GradientDrift => {
                let cx = x - 0.5 * self.w;
                let cy = y - 0.5 * self.h;
                self.base + self.ramp.0 * cx + self.ramp.1 * cy + waves
            }
            Pattern::NoiseTexture => self.base + waves,
        }
    }

    /// Pixel value at integer position `(x, y)` of a frame whose content is
    /// translated by `(ox, oy)`. Checkers are integrated exactly over the
    /// pixel footprint so edges move continuously with the offset.
    pub fn sample(&self, x: f64, y: f64, ox: f64, oy: f64) -> f64 {
        let (px, py) = (x - ox, y - oy);
        let v = match self.kind {
            Pattern::Checker => {
                let s = self.square;
                // antiderivative of a ±1 square wave of half-period s
                let tri = |t: f64| {
                    let u = t.rem_euclid(2.0 * s);
                    if u < s {
                        u
                    } else {
                        2.0 * s - u
                    }
                };
                let ix = tri(px + 0.5) - tri(px - 0.5);
                let iy = tri(py + 0.5) - tri(py - 0.5);
                0.5 + 0.25 * ix * iy
            }
            _ => self.point(px, py),
        };
        v.clamp(0.0, 1.0)
    }

    pub fn render(&self, h: usize, w: usize, ox: f64, oy: f64) -> Frame {
        let data = (0..h * w)
            .map(|i| self.sample((i % w) as f64, (i / w) as f64, ox, oy))
            .collect();
        Frame::new(h, w, 1, data)
    }
}

/// Translates a frame by `(dx, dy)` with bilinear interpolation and edge
/// clamping: `out(x) = in(x - d)`.
pub fn warp_translate(f: &Frame, dx: f64, dy: f64) -> Frame {
    if dx == 0.0 && dy == 0.0 {
        return f.clone();
    }
    warp_field(f, |_, _| (dx, dy))
}

/// Warps by a per-pixel displacement `d(y, x)`: `out(x) = in(x - d(x))`.
pub fn warp_field(f: &Frame, d: impl Fn(usize, usize) -> (f64, f64)) -> Frame {
    let mut out = Frame::filled(f.h, f.w, f.c, 0.0);
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for y in 0..f.h {
        for x in 0..f.w {
            let (dx, dy) = d(y, x);
            let (sx, sy) = (x as f64 - dx, y as f64 - dy);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (xa, xb) = (clampi(x0 as isize, f.w), clampi(x0 as isize + 1, f.w));
            let (ya, yb) = (clampi(y0 as isize, f.h), clampi(y0 as isize + 1, f.h));
            for ch in 0..f.c {
                let top = f.at(ya, xa, ch) * (1.0 - fx) + f.at(ya, xb, ch) * fx;
                let bot = f.at(yb, xa, ch) * (1.0 - fx) + f.at(yb, xb, ch) * fx;
                out.set(y, x, ch, (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// One frame's jitter: half the amplitude as a global offset, half as a
/// plane-wave ripple of one to two cycles across the frame. Each component
/// stays within `±amp`.
#[derive(Debug, Clone, Copy)]
struct Jitter {
    global: (f64, f64),
    ripple: (f64, f64),
    freq: (f64, f64),
    phase: f64,
}

impl Jitter {
    fn draw(rng: &mut impl Rng, amp: f64, h: usize, w: usize) -> Self {
        let half = amp / 2.0;
        let cycles = rng.gen_range(1.0..2.0);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        Jitter {
            global: (rng.gen_range(-half..=half), rng.gen_range(-half..=half)),
            ripple: (rng.gen_range(-half..=half), rng.gen_range(-half..=half)),
            freq: (cycles * angle.cos() / w as f64, cycles * angle.sin() / h as f64),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let s = (std::f64::consts::TAU * (self.freq.0 * x as f64 + self.freq.1 * y as f64) + self.phase).sin();
        (self.global.0 + self.ripple.0 * s, self.global.1 + self.ripple.1 * s)
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn render_reference(spec: &SynthSpec, content_seed: u64) -> VideoTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(content_seed);
    let field = PatternField::new(spec.pattern, spec.h, spec.w, &mut rng);
    let d = spec.drift_max;
    let (vx, vy) = if d > 0.0 { (rng.gen_range(-d..d), rng.gen_range(-d..d)) } else { (0.0, 0.0) };
    let frames = (0..spec.frames)
        .map(|t| field.render(spec.h, spec.w, vx * t as f64, vy * t as f64))
        .collect();
    VideoTensor::new(frames, 25.0).expect("synthetic frames are valid")
}

fn distort(spec: &SynthSpec, reference: &VideoTensor, amp: f64, jitter_seed: u64) -> VideoTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    let frames = reference
        .frames
        .iter()
        .map(|f| {
            let mut out = if amp > 0.0 {
                let j = Jitter::draw(&mut rng, amp, f.h, f.w);
                warp_field(f, |y, x| j.at(y, x))
            } else {
                f.clone()
            };
            if spec.flicker_amp > 0.0 {
                let gain = 1.0 + spec.flicker_amp * rng.gen_range(-1.0..=1.0);
                out.data.iter_mut().for_each(|v| *v = (*v * gain).clamp(0.0, 1.0));
            }
            out
        })
        .collect();
    VideoTensor::new(frames, reference.fps).expect("warped frames are valid")
}

/// One clip at `spec.jitter_amp`, fully determined by `spec.seed`.
pub fn gen_pair(spec: &SynthSpec) -> Result<LabeledClip> {
    spec.validate()?;
    let reference = render_reference(spec, mix_seed(spec.seed, 1));
    let distorted = distort(spec, &reference, spec.jitter_amp, mix_seed(spec.seed, 2));
    Ok(LabeledClip {
        id: format!("clip_s{}_a{}", spec.seed, spec.jitter_amp),
        content: 0,
        reference,
        distorted,
        mos: spec.mos_for(spec.jitter_amp),
        amp: spec.jitter_amp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub content: usize,
    pub amp: f64,
    pub mos: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub amp_grid: Vec<f64>,
    pub clips: Vec<ManifestEntry>,
}

/// `spec.n_clips` clips balanced over `amp_grid`. Each reference content is
/// distorted once at every amplitude, so clips come in content groups of
/// `amp_grid.len()`.
pub fn gen_dataset(spec: &SynthSpec, amp_grid: &[f64]) -> Result<(Vec<LabeledClip>, Manifest)> {
    spec.validate()?;
    if amp_grid.is_empty() {
        return Err(Error::InvalidParam("empty amplitude grid".into()));
    }
    if amp_grid.iter().any(|&a| a < 0.0) {
        return Err(Error::InvalidParam("amplitudes must be non-negative".into()));
    }
    let mut clips = Vec::with_capacity(spec.n_clips);
    let mut entries = Vec::with_capacity(spec.n_clips);
    let mut reference = None;
    for k in 0..spec.n_clips {
        let content = k / amp_grid.len();
        let amp = amp_grid[k % amp_grid.len()];
        if k % amp_grid.len() == 0 {
            reference = Some(render_reference(spec, mix_seed(spec.seed, 1000 + content as u64)));
        }
        let reference = reference.clone().expect("set on first clip of each group");
        let seed = mix_seed(spec.seed, 5_000_000 + k as u64);
        let distorted = distort(spec, &reference, amp, seed);
        let id = format!("clip_{k:04}");
        entries.push(ManifestEntry {
            id: id.clone(),
            content,
            amp,
            mos: spec.mos_for(amp),
            seed,
        });
        clips.push(LabeledClip {
            id,
            content,
            reference,
            distorted,
            mos: spec.mos_for(amp),
            amp,
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        amp_grid: amp_grid.to_vec(),
        clips: entries,
    };
    Ok((clips, manifest))
}

/// Writes `manifest.json` plus `<id>/ref` and `<id>/dist` raw planar clips.
pub fn write_dataset(dir: &Path, clips: &[LabeledClip], manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for c in clips {
        save_video(&c.reference, &dir.join(&c.id).join("ref"), VideoFormat::RawPlanar)?;
        save_video(&c.distorted, &dir.join(&c.id).join("dist"), VideoFormat::RawPlanar)?;
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(&path, e))
}

/// Loads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Vec<LabeledClip>, Manifest)> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let clips = manifest
        .clips
        .iter()
        .map(|e| {
            Ok(LabeledClip {
                id: e.id.clone(),
                content: e.content,
                reference: crate::media::load_video(&dir.join(&e.id).join("ref"), VideoFormat::RawPlanar)?,
                distorted: crate::media::load_video(&dir.join(&e.id).join("dist"), VideoFormat::RawPlanar)?,
                mos: e.mos,
                amp: e.amp,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((clips, manifest))
}
