//! Video containers and bit-exact I/O.
//!
//! Samples are held as unit-interval `f64`. Eight-bit integers only exist at
//! the file boundary: loading divides by 255, saving multiplies and rounds.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single frame, `h × w × c` interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w * c, "frame buffer length");
        Frame { h, w, c, data }
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Frame::new(h, w, c, vec![value; h * w * c])
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    /// Single channel as a dense plane.
    pub fn plane(&self, ch: usize) -> Vec<f64> {
        self.data.iter().skip(ch).step_by(self.c).copied().collect()
    }
}

/// Frame sequence with shared geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    pub frames: Vec<Frame>,
    pub source_depth: u8,
    pub fps: f64,
}

impl VideoTensor {
    /// Validates the container invariants: at least two frames, C in {1,3},
    /// shared geometry and unit-interval samples.
    pub fn new(frames: Vec<Frame>, fps: f64) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Format(format!(
                "video needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        let (h, w, c) = (frames[0].h, frames[0].w, frames[0].c);
        if c != 1 && c != 3 {
            return Err(Error::Unsupported(format!("{c} channels")));
        }
        for (i, f) in frames.iter().enumerate() {
            if (f.h, f.w, f.c) != (h, w, c) {
                return Err(Error::Shape(format!(
                    "frame {i} is {}x{}x{}, expected {h}x{w}x{c}",
                    f.h, f.w, f.c
                )));
            }
            if f.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Format(format!("frame {i} has samples outside [0,1]")));
            }
        }
        Ok(VideoTensor {
            frames,
            source_depth: 8,
            fps,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let f = &self.frames[0];
        (f.h, f.w, f.c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoFormat {
    PngSeq,
    RawPlanar,
    Y4m,
}

impl std::str::FromStr for VideoFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png_seq" | "png" => Ok(VideoFormat::PngSeq),
            "raw_planar" | "raw" => Ok(VideoFormat::RawPlanar),
            "y4m" => Ok(VideoFormat::Y4m),
            other => Err(Error::Unsupported(format!("video format {other:?}"))),
        }
    }
}

/// Picks a format from what is on disk: `.y4m` file, directory with
/// `header.json`, otherwise a PNG directory.
pub fn detect_format(path: &Path) -> Result<VideoFormat> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    if path.is_file() {
        return match path.extension().and_then(|e| e.to_str()) {
            Some("y4m") => Ok(VideoFormat::Y4m),
            _ => Err(Error::Unsupported(format!("cannot infer format of {}", path.display()))),
        };
    }
    if path.join("header.json").exists() {
        Ok(VideoFormat::RawPlanar)
    } else {
        Ok(VideoFormat::PngSeq)
    }
}

pub fn load_video(path: &Path, format: VideoFormat) -> Result<VideoTensor> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    match format {
        VideoFormat::PngSeq => load_png_seq(path),
        VideoFormat::RawPlanar => load_raw_planar(path),
        VideoFormat::Y4m => load_y4m(path),
    }
}

pub fn save_video(v: &VideoTensor, path: &Path, format: VideoFormat) -> Result<()> {
    match format {
        VideoFormat::PngSeq => save_png_seq(v, path),
        VideoFormat::RawPlanar => save_raw_planar(v, path),
        VideoFormat::Y4m => Err(Error::Unsupported("writing y4m".into())),
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn numeric_key(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

fn load_png_seq(dir: &Path) -> Result<VideoTensor> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            let key = numeric_key(&p)
                .ok_or_else(|| Error::Format(format!("unnumbered frame {}", p.display())))?;
            files.push((key, p));
        }
    }
    files.sort();
    let mut frames = Vec::with_capacity(files.len());
    for (_, p) in &files {
        let img = image::open(p)?;
        let frame = if img.color().has_color() {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
            Frame::new(h as usize, w as usize, 3, data)
        } else {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            let data = g.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
            Frame::new(h as usize, w as usize, 1, data)
        };
        frames.push(frame);
    }
    VideoTensor::new(frames, 25.0)
}

fn save_png_seq(v: &VideoTensor, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w, c) = v.dims();
    for (i, f) in v.frames.iter().enumerate() {
        let bytes: Vec<u8> = f.data.iter().map(|&s| to_u8(s)).collect();
        let path = dir.join(format!("{i:05}.png"));
        let color = if c == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(&path, &bytes, w as u32, h as u32, color)?;
    }
    Ok(())
}

/// `header.json` of the raw planar layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    #[serde(rename = "F")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(default = "default_depth")]
    pub depth: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

fn default_depth() -> u8 {
    8
}

fn load_raw_planar(dir: &Path) -> Result<VideoTensor> {
    let header_path = dir.join("header.json");
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let hdr: RawHeader = serde_json::from_str(&text)?;
    if hdr.depth != 8 {
        return Err(Error::Unsupported(format!("raw_planar depth {}", hdr.depth)));
    }
    let bin_path = dir.join("frames.bin");
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let plane = hdr.height * hdr.width;
    let expected = hdr.frames * hdr.channels * plane;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "frames.bin has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let frames = bytes
        .chunks_exact((hdr.channels * plane).max(1))
        .map(|chunk| {
            let mut data = vec![0.0; hdr.channels * plane];
            for ch in 0..hdr.channels {
                for (i, &b) in chunk[ch * plane..(ch + 1) * plane].iter().enumerate() {
                    data[i * hdr.channels + ch] = b as f64 / 255.0;
                }
            }
            Frame::new(hdr.height, hdr.width, hdr.channels, data)
        })
        .collect();
    VideoTensor::new(frames, hdr.fps.unwrap_or(25.0))
}

fn save_raw_planar(v: &VideoTensor, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w, c) = v.dims();
    let hdr = RawHeader {
        frames: v.len(),
        height: h,
        width: w,
        channels: c,
        depth: 8,
        fps: Some(v.fps),
    };
    let header_path = dir.join("header.json");
    fs::write(&header_path, serde_json::to_vec_pretty(&hdr)?)
        .map_err(|e| Error::io(&header_path, e))?;
    let mut bytes = Vec::with_capacity(v.len() * h * w * c);
    for f in &v.frames {
        for ch in 0..c {
            bytes.extend(f.data.iter().skip(ch).step_by(c).map(|&s| to_u8(s)));
        }
    }
    let bin_path = dir.join("frames.bin");
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Chroma {
    C420,
    C444,
}

fn load_y4m(path: &Path) -> Result<VideoTensor> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = BufReader::new(file);
    let mut line = Vec::new();
    rd.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
    let header = String::from_utf8_lossy(&line);
    let mut tokens = header.trim_end().split(' ');
    if tokens.next() != Some("YUV4MPEG2") {
        return Err(Error::Format("missing YUV4MPEG2 signature".into()));
    }
    let (mut w, mut h, mut fps, mut chroma) = (0usize, 0usize, 25.0, Chroma::C420);
    for tok in tokens {
        let (tag, val) = tok.split_at(1);
        match tag {
            "W" => w = val.parse().map_err(|_| Error::Format(format!("bad width {val}")))?,
            "H" => h = val.parse().map_err(|_| Error::Format(format!("bad height {val}")))?,
            "F" => {
                if let Some((n, d)) = val.split_once(':') {
                    let n: f64 = n.parse().unwrap_or(25.0);
                    let d: f64 = d.parse().unwrap_or(1.0);
                    if d > 0.0 {
                        fps = n / d;
                    }
                }
            }
            "C" => {
                chroma = if val.starts_with("420") {
                    Chroma::C420
                } else if val.starts_with("444") && !val.contains("alpha") {
                    Chroma::C444
                } else {
                    return Err(Error::Unsupported(format!("y4m chroma C{val}")));
                }
            }
            _ => {}
        }
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("y4m header lacks dimensions".into()));
    }
    let (cw, ch) = match chroma {
        Chroma::C420 => (w.div_ceil(2), h.div_ceil(2)),
        Chroma::C444 => (w, h),
    };
    let frame_bytes = w * h + 2 * cw * ch;
    let mut frames = Vec::new();
    loop {
        line.clear();
        let n = rd.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        if !line.starts_with(b"FRAME") {
            return Err(Error::Format("expected FRAME marker".into()));
        }
        let mut buf = vec![0u8; frame_bytes];
        rd.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        let (yp, rest) = buf.split_at(w * h);
        let (up, vp) = rest.split_at(cw * ch);
        let mut data = vec![0.0; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                let ci = match chroma {
                    Chroma::C420 => (y / 2) * cw + x / 2,
                    Chroma::C444 => y * cw + x,
                };
                let luma = yp[y * w + x] as f64;
                let cb = up[ci] as f64 - 128.0;
                let cr = vp[ci] as f64 - 128.0;
                // Full-range BT.601.
                let r = luma + 1.402 * cr;
                let g = luma - 0.344136 * cb - 0.714136 * cr;
                let b = luma + 1.772 * cb;
                let o = (y * w + x) * 3;
                data[o] = (r / 255.0).clamp(0.0, 1.0);
                data[o + 1] = (g / 255.0).clamp(0.0, 1.0);
                data[o + 2] = (b / 255.0).clamp(0.0, 1.0);
            }
        }
        frames.push(Frame::new(h, w, 3, data));
    }
    VideoTensor::new(frames, fps)
}

/// Writes an uncompressed 4:4:4 or 4:2:0 stream from 8-bit planes. Used by
/// tests and tooling that need y4m fixtures.
pub fn write_y4m_planes(
    path: &Path,
    w: usize,
    h: usize,
    c420: bool,
    frames: &[(Vec<u8>, Vec<u8>, Vec<u8>)],
) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let tag = if c420 { "420jpeg" } else { "444" };
    let mut out = format!("YUV4MPEG2 W{w} H{h} F25:1 Ip A1:1 C{tag}\n").into_bytes();
    for (y, u, v) in frames {
        out.extend_from_slice(b"FRAME\n");
        out.extend_from_slice(y);
        out.extend_from_slice(u);
        out.extend_from_slice(v);
    }
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub fn frame_to_gray(f: &Frame) -> Frame {
    if f.c == 1 {
        return f.clone();
    }
    let data = f
        .data
        .chunks_exact(3)
        .map(|p| LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
        .map(|g| g.clamp(0.0, 1.0))
        .collect();
    Frame::new(f.h, f.w, 1, data)
}

pub fn to_grayscale(v: &VideoTensor) -> VideoTensor {
    VideoTensor {
        frames: v.frames.iter().map(frame_to_gray).collect(),
        source_depth: v.source_depth,
        fps: v.fps,
    }
}

/// Bilinear resize with half-pixel centre alignment and edge clamping.
pub fn resize_frame(f: &Frame, new_h: usize, new_w: usize) -> Frame {
    assert!(new_h >= 1 && new_w >= 1, "resize target must be non-empty");
    if new_h == f.h && new_w == f.w {
        return f.clone();
    }
    let sy = f.h as f64 / new_h as f64;
    let sx = f.w as f64 / new_w as f64;
    let axis = |i: usize, scale: f64, n: usize| {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let xs: Vec<_> = (0..new_w).map(|x| axis(x, sx, f.w)).collect();
    let mut data = vec![0.0; new_h * new_w * f.c];
    for y in 0..new_h {
        let (y0, y1, fy) = axis(y, sy, f.h);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..f.c {
                let top = f.at(y0, x0, ch) * (1.0 - fx) + f.at(y0, x1, ch) * fx;
                let bot = f.at(y1, x0, ch) * (1.0 - fx) + f.at(y1, x1, ch) * fx;
                data[(y * new_w + x) * f.c + ch] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }
        }
    }
    Frame::new(new_h, new_w, f.c, data)
}

pub fn resize_bilinear(v: &VideoTensor, new_h: usize, new_w: usize) -> VideoTensor {
    VideoTensor {
        frames: v.frames.iter().map(|f| resize_frame(f, new_h, new_w)).collect(),
        source_depth: v.source_depth,
        fps: v.fps,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFormat {
    Pgm16,
    Png,
}

/// Min-max scales a scalar map to the full integer range of `format`.
/// Constant maps are written as zeros.
pub fn save_map(map: &[f64], h: usize, w: usize, path: &Path, format: MapFormat) -> Result<()> {
    if map.len() != h * w {
        return Err(Error::Shape(format!("map has {} values, expected {h}x{w}", map.len())));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("map contains non-finite values".into()));
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let unit = |v: f64| if span > 0.0 { (v - lo) / span } else { 0.0 };
    match format {
        MapFormat::Pgm16 => {
            let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
            for &v in map {
                let q = (unit(v) * 65535.0).round() as u16;
                out.extend_from_slice(&q.to_be_bytes());
            }
            fs::write(path, out).map_err(|e| Error::io(path, e))
        }
        MapFormat::Png => {
            let bytes: Vec<u8> = map.iter().map(|&v| (unit(v) * 255.0).round() as u8).collect();
            image::save_buffer(path, &bytes, w as u32, h as u32, image::ExtendedColorType::L8)?;
            Ok(())
        }
    }
}

/// Reads a binary PGM (8- or 16-bit) back as raw integer levels.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Format("not a binary PGM".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field {s}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    let body = &bytes[pos..];
    let px = if maxval > 255 {
        if body.len() < 2 * w * h {
            return Err(Error::Format("truncated PGM body".into()));
        }
        body.chunks_exact(2).take(w * h).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        if body.len() < w * h {
            return Err(Error::Format("truncated PGM body".into()));
        }
        body[..w * h].iter().map(|&b| b as u16).collect()
    };
    Ok((h, w, px))
}
