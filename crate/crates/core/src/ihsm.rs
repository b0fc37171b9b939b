//! Spatial feature extraction over highlighted frames.
//!
//! The coarse branch is a small windowed-attention transformer: patch
//! embedding, stages of paired blocks with (shifted) window attention, and
//! deformable up-sampling window attention in the third stage. The fine
//! branch is a small residual CNN at native resolution. Both end in global
//! average pooling and a projection, and their outputs are concatenated per
//! frame.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{resize_frame, VideoTensor};
use crate::nn::{Graph, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub dim: usize,
    pub heads: usize,
    /// Number of (regular, shifted) block pairs.
    pub pairs: usize,
    /// Halve the token grid with a 2×2 patch merge before the stage.
    pub merge: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwSaConfig {
    pub window: usize,
    pub shift: usize,
    pub upsample_r: usize,
    pub heads: usize,
    /// Largest offset magnitude per axis, in token units.
    pub offset_clamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoarseConfig {
    /// Frames are resized to `input × input`.
    pub input: usize,
    pub patch: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub stages: Vec<StageConfig>,
    /// Stage (0-based) whose shifted blocks use deformable attention.
    pub dwsa_stage: Option<usize>,
    pub dwsa_upsample_r: usize,
    pub dwsa_heads: usize,
    pub offset_clamp: f64,
    pub out_dim: usize,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        CoarseConfig {
            input: 56,
            patch: 4,
            window: 7,
            mlp_ratio: 2,
            stages: vec![
                StageConfig { dim: 16, heads: 2, pairs: 1, merge: false },
                StageConfig { dim: 32, heads: 2, pairs: 1, merge: true },
                StageConfig { dim: 32, heads: 2, pairs: 1, merge: false },
            ],
            dwsa_stage: Some(2),
            dwsa_upsample_r: 2,
            dwsa_heads: 1,
            offset_clamp: 2.0,
            out_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineConfig {
    pub stem: usize,
    /// Output channels of each stride-2 residual block.
    pub blocks: Vec<usize>,
    pub out_dim: usize,
}

impl Default for FineConfig {
    fn default() -> Self {
        FineConfig { stem: 8, blocks: vec![16, 32], out_dim: 64 }
    }
}

/// Row-major token grid `[b, h, w, c]` flattened to `[b·h·w, c]`.
#[derive(Debug, Clone, Copy)]
struct Grid {
    b: usize,
    h: usize,
    w: usize,
}

impl Grid {
    fn rows(&self) -> usize {
        self.b * self.h * self.w
    }

    fn row(&self, b: usize, y: usize, x: usize) -> usize {
        (b * self.h + y) * self.w + x
    }
}

/// Expands a row permutation to element indices for rows of width `c`.
fn expand_rows(rows: &[usize], c: usize) -> Arc<[usize]> {
    rows.iter().flat_map(|&r| (r * c)..(r * c + c)).collect()
}

fn gather_rows(g: &mut Graph, x: Var, rows: &[usize], shape: &[usize]) -> Result<Var> {
    let c = *g.shape(x).last().unwrap();
    g.gather(x, expand_rows(rows, c), shape)
}

fn inverse(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (o, &i) in p.iter().enumerate() {
        inv[i] = o;
    }
    inv
}

/// Rows of the map cyclically rolled by `-shift`: rolled position `(y, x)`
/// holds the token from `((y + s) mod h, (x + s) mod w)`.
fn roll_rows(grid: Grid, shift: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(grid.rows());
    for b in 0..grid.b {
        for y in 0..grid.h {
            for x in 0..grid.w {
                rows.push(grid.row(b, (y + shift) % grid.h, (x + shift) % grid.w));
            }
        }
    }
    rows
}

/// Rows in window order `[b, window, token]`, tokens row-major in a window.
fn window_rows(grid: Grid, ws: usize) -> Vec<usize> {
    let (nh, nw) = (grid.h / ws, grid.w / ws);
    let mut rows = Vec::with_capacity(grid.rows());
    for b in 0..grid.b {
        for wy in 0..nh {
            for wx in 0..nw {
                for ty in 0..ws {
                    for tx in 0..ws {
                        rows.push(grid.row(b, wy * ws + ty, wx * ws + tx));
                    }
                }
            }
        }
    }
    rows
}

fn region(v: usize, n: usize, ws: usize, shift: usize) -> usize {
    if v < n - ws {
        0
    } else if v < n - shift {
        1
    } else {
        2
    }
}

/// Per-window token labels that separate regions brought together by the
/// cyclic shift, `[n_windows, ws·ws]`, or `None` without a shift.
fn shift_labels(h: usize, w: usize, ws: usize, shift: usize) -> Option<Vec<Vec<usize>>> {
    if shift == 0 {
        return None;
    }
    let mut labels = Vec::new();
    for wy in 0..h / ws {
        for wx in 0..w / ws {
            let mut l = Vec::with_capacity(ws * ws);
            for ty in 0..ws {
                for tx in 0..ws {
                    l.push(region(wy * ws + ty, h, ws, shift) * 3 + region(wx * ws + tx, w, ws, shift));
                }
            }
            labels.push(l);
        }
    }
    Some(labels)
}

/// Attention mask `[b·n_windows, t, t]` from per-window labels.
fn label_mask(labels: &[Vec<usize>], b: usize) -> Vec<bool> {
    let mut m = Vec::new();
    for _ in 0..b {
        for l in labels {
            for &li in l {
                m.extend(l.iter().map(|&lj| li == lj));
            }
        }
    }
    m
}

/// Labels of the `(r·ws)²` up-sampled tokens, inherited from their parent.
fn upsample_labels(labels: &[Vec<usize>], ws: usize, r: usize) -> Vec<Vec<usize>> {
    let us = ws * r;
    labels
        .iter()
        .map(|l| (0..us * us).map(|i| l[(i / us / r) * ws + (i % us) / r]).collect())
        .collect()
}

/// Element index for shuffling window tokens `[nw, ws², c]` (channel-last)
/// into `[nw, (r·ws)², c / r²]`.
fn window_shuffle_index(nwin: usize, ws: usize, c: usize, r: usize) -> Arc<[usize]> {
    let us = ws * r;
    let co = c / (r * r);
    let mut idx = Vec::with_capacity(nwin * us * us * co);
    for w in 0..nwin {
        for yy in 0..us {
            for xx in 0..us {
                let tok = (yy / r) * ws + xx / r;
                for ch in 0..co {
                    let src_c = ch * r * r + (yy % r) * r + xx % r;
                    idx.push((w * ws * ws + tok) * c + src_c);
                }
            }
        }
    }
    idx.into()
}

/// Row groups averaging each `r × r` cell of the up-sampled windows.
fn window_pool_groups(nwin: usize, ws: usize, r: usize) -> Arc<[Vec<usize>]> {
    let us = ws * r;
    let mut groups = Vec::with_capacity(nwin * ws * ws);
    for w in 0..nwin {
        for ty in 0..ws {
            for tx in 0..ws {
                let mut gr = Vec::with_capacity(r * r);
                for i in 0..r {
                    for j in 0..r {
                        gr.push(w * us * us + (ty * r + i) * us + tx * r + j);
                    }
                }
                groups.push(gr);
            }
        }
    }
    groups.into()
}

/// Learned parts that turn a shifted block into a deformable one.
#[derive(Debug, Clone)]
pub struct DwSaParts {
    pub offset: Linear,
    /// Projects the pooled `c / r²` channels back to `c`; absent for `r = 1`.
    pub expand: Option<Linear>,
    pub upsample_r: usize,
    pub offset_clamp: f64,
}

/// Pre-norm transformer block over windows of a token grid.
#[derive(Debug, Clone)]
pub struct WindowBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub window: usize,
    pub shift: usize,
    pub dim: usize,
    pub dwsa: Option<DwSaParts>,
}

impl WindowBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if shift >= window.max(1) {
            return Err(Error::InvalidParam(format!("shift {shift} must be below window {window}")));
        }
        Ok(WindowBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp1: Linear::new(store, &format!("{name}.mlp1"), dim, dim * mlp_ratio),
            mlp2: Linear::new(store, &format!("{name}.mlp2"), dim * mlp_ratio, dim),
            window,
            shift,
            dim,
            dwsa: None,
        })
    }

    /// Deformable up-sampling window block.
    pub fn new_dwsa(store: &mut ParamStore, name: &str, dim: usize, cfg: &DwSaConfig, mlp_ratio: usize) -> Result<Self> {
        let r = cfg.upsample_r;
        if r == 0 || dim % (r * r) != 0 {
            return Err(Error::InvalidParam(format!("dim {dim} not divisible by r² = {}", r * r)));
        }
        if cfg.shift >= cfg.window.max(1) {
            return Err(Error::InvalidParam(format!(
                "shift {} must be below window {}",
                cfg.shift, cfg.window
            )));
        }
        let inner = dim / (r * r);
        Ok(WindowBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), inner, cfg.heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp1: Linear::new(store, &format!("{name}.mlp1"), dim, dim * mlp_ratio),
            mlp2: Linear::new(store, &format!("{name}.mlp2"), dim * mlp_ratio, dim),
            window: cfg.window,
            shift: cfg.shift,
            dim,
            dwsa: Some(DwSaParts {
                offset: Linear::new(store, &format!("{name}.offset"), dim, 2),
                expand: (r > 1).then(|| Linear::new(store, &format!("{name}.expand"), inner, dim)),
                upsample_r: r,
                offset_clamp: cfg.offset_clamp,
            }),
        })
    }

    /// The same block without the deformable parts.
    pub fn as_plain(&self) -> WindowBlock {
        WindowBlock { dwsa: None, ..self.clone() }
    }

    fn check(&self, grid: Grid) -> Result<()> {
        if self.window == 0 || grid.h % self.window != 0 || grid.w % self.window != 0 {
            return Err(Error::Shape(format!(
                "window {} does not tile a {}x{} token grid",
                self.window, grid.h, grid.w
            )));
        }
        Ok(())
    }

    fn window_attention(&self, g: &mut Graph, store: &ParamStore, y: Var, grid: Grid) -> Result<Var> {
        let ws = self.window;
        let nwin = (grid.h / ws) * (grid.w / ws);
        let roll = roll_rows(grid, self.shift);
        let win = window_rows(Grid { b: grid.b, ..grid }, ws);
        let order: Vec<usize> = win.iter().map(|&p| roll[p]).collect();
        let yw = gather_rows(g, y, &order, &[grid.b * nwin, ws * ws, self.dim])?;
        let mask = shift_labels(grid.h, grid.w, ws, self.shift).map(|l| label_mask(&l, grid.b));
        let (o, _) = self.attn.forward(g, store, yw, mask.as_deref())?;
        gather_rows(g, o, &inverse(&order), &[grid.rows(), self.dim])
    }

    fn deformable_attention(&self, g: &mut Graph, store: &ParamStore, y: Var, grid: Grid, parts: &DwSaParts) -> Result<Var> {
        let (ws, r, c) = (self.window, parts.upsample_r, self.dim);
        let nwin = (grid.h / ws) * (grid.w / ws);
        let t = ws * ws;
        let roll = roll_rows(grid, self.shift);
        let rolled = gather_rows(g, y, &roll, &[grid.b, grid.h, grid.w, c])?;
        let rolled_rows = g.reshape(rolled, &[grid.rows(), c])?;

        // one offset per window from its mean token
        let win = window_rows(grid, ws);
        let groups: Arc<[Vec<usize>]> = win.chunks(t).map(<[usize]>::to_vec).collect();
        let means = g.group_mean(rolled_rows, groups)?;
        let off = parts.offset.forward(g, store, means)?;
        let off = g.tanh(off);
        let off = g.scale(off, parts.offset_clamp);

        let mut base = Vec::with_capacity(grid.b * nwin * t * 2);
        let mut spread = Vec::with_capacity(grid.b * nwin * t * 2);
        for b in 0..grid.b {
            for wy in 0..grid.h / ws {
                for wx in 0..grid.w / ws {
                    let wi = (b * (grid.h / ws) + wy) * (grid.w / ws) + wx;
                    for ty in 0..ws {
                        for tx in 0..ws {
                            base.push((wx * ws + tx) as f64);
                            base.push((wy * ws + ty) as f64);
                            spread.push(wi * 2);
                            spread.push(wi * 2 + 1);
                        }
                    }
                }
            }
        }
        let base = g.input(Tensor::from_vec(&[grid.b, nwin * t, 2], base));
        let off = g.gather(off, spread.into(), &[grid.b, nwin * t, 2])?;
        let coords = g.add(base, off)?;
        let sampled = g.bilinear_sample(rolled, coords)?;

        let labels = shift_labels(grid.h, grid.w, ws, self.shift);
        let nb = grid.b * nwin;
        let attended = if r == 1 {
            let tokens = g.reshape(sampled, &[nb, t, c])?;
            let mask = labels.map(|l| label_mask(&l, grid.b));
            let (o, _) = self.attn.forward(g, store, tokens, mask.as_deref())?;
            g.reshape(o, &[nb * t, c])?
        } else {
            let us = ws * r;
            let inner = c / (r * r);
            let up = g.gather(sampled, window_shuffle_index(nb, ws, c, r), &[nb, us * us, inner])?;
            let mask = labels.map(|l| label_mask(&upsample_labels(&l, ws, r), grid.b));
            let (o, _) = self.attn.forward(g, store, up, mask.as_deref())?;
            let o = g.reshape(o, &[nb * us * us, inner])?;
            let pooled = g.group_mean(o, window_pool_groups(nb, ws, r))?;
            match &parts.expand {
                Some(e) => e.forward(g, store, pooled)?,
                None => pooled,
            }
        };
        let order: Vec<usize> = win.iter().map(|&p| roll[p]).collect();
        gather_rows(g, attended, &inverse(&order), &[grid.rows(), c])
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, grid: Grid) -> Result<Var> {
        self.check(grid)?;
        let y = self.ln1.forward(g, store, x)?;
        let a = match &self.dwsa {
            Some(parts) => self.deformable_attention(g, store, y, grid, parts)?,
            None => self.window_attention(g, store, y, grid)?,
        };
        let x = g.add(x, a)?;
        let y = self.ln2.forward(g, store, x)?;
        let y = self.mlp1.forward(g, store, y)?;
        let y = g.gelu(y);
        let y = self.mlp2.forward(g, store, y)?;
        g.add(x, y)
    }

    /// Applies the block to tokens `x: [b, h, w, dim]`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[3] != self.dim {
            return Err(Error::Shape(format!("block expects [b, h, w, {}], got {s:?}", self.dim)));
        }
        let grid = Grid { b: s[0], h: s[1], w: s[2] };
        let rows = g.reshape(x, &[grid.rows(), self.dim])?;
        let out = self.forward(g, store, rows, grid)?;
        g.reshape(out, &s)
    }

    /// Current per-window offsets for tokens `x: [b, h, w, dim]`, before any
    /// gradient bookkeeping; `None` for plain blocks.
    pub fn offsets(&self, store: &ParamStore, x: &Tensor) -> Result<Option<Vec<(f64, f64)>>> {
        let Some(parts) = &self.dwsa else { return Ok(None) };
        let mut g = Graph::new();
        let (b, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let grid = Grid { b, h, w };
        self.check(grid)?;
        let xv = g.input(Tensor::from_vec(&[grid.rows(), self.dim], x.data.clone()));
        let y = self.ln1.forward(&mut g, store, xv)?;
        let roll = roll_rows(grid, self.shift);
        let rolled = gather_rows(&mut g, y, &roll, &[grid.rows(), self.dim])?;
        let win = window_rows(grid, self.window);
        let groups: Arc<[Vec<usize>]> = win.chunks(self.window * self.window).map(<[usize]>::to_vec).collect();
        let means = g.group_mean(rolled, groups)?;
        let off = parts.offset.forward(&mut g, store, means)?;
        let off = g.tanh(off);
        let off = g.scale(off, parts.offset_clamp);
        Ok(Some(g.value(off).data.chunks(2).map(|p| (p[0], p[1])).collect()))
    }
}

struct Stage {
    merge: Option<(LayerNorm, Linear)>,
    blocks: Vec<WindowBlock>,
    dim: usize,
}

/// Windowed-attention feature extractor.
pub struct CoarseExtractor {
    pub cfg: CoarseConfig,
    channels: usize,
    patch_w: ParamId,
    patch_b: ParamId,
    patch_ln: LayerNorm,
    stages: Vec<Stage>,
    final_ln: LayerNorm,
    head: Linear,
}

/// Token grid side after each stage, for validation.
fn stage_sides(cfg: &CoarseConfig) -> Result<Vec<usize>> {
    if cfg.patch == 0 || cfg.input % cfg.patch != 0 {
        return Err(Error::InvalidParam(format!("patch {} does not tile input {}", cfg.patch, cfg.input)));
    }
    let mut side = cfg.input / cfg.patch;
    let mut out = Vec::new();
    for (i, s) in cfg.stages.iter().enumerate() {
        if s.merge {
            if side % 2 != 0 {
                return Err(Error::InvalidParam(format!("stage {i} merges an odd {side}x{side} grid")));
            }
            side /= 2;
        }
        out.push(side);
    }
    Ok(out)
}

impl CoarseExtractor {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &CoarseConfig, channels: usize) -> Result<Self> {
        let sides = stage_sides(cfg)?;
        let first = cfg.stages.first().ok_or_else(|| Error::InvalidParam("no coarse stages".into()))?;
        let fan = channels * cfg.patch * cfg.patch;
        let patch_w = store.add_uniform(&format!("{name}.patch.w"), &[first.dim, channels, cfg.patch, cfg.patch], fan);
        let patch_b = store.add_uniform(&format!("{name}.patch.b"), &[first.dim], fan);
        let patch_ln = LayerNorm::new(store, &format!("{name}.patch.ln"), first.dim);
        let mut stages = Vec::new();
        let mut prev = first.dim;
        for (i, (s, &side)) in cfg.stages.iter().zip(&sides).enumerate() {
            let merge = if s.merge {
                Some((
                    LayerNorm::new(store, &format!("{name}.s{i}.merge.ln"), 4 * prev),
                    Linear::new(store, &format!("{name}.s{i}.merge"), 4 * prev, s.dim),
                ))
            } else if prev != s.dim {
                return Err(Error::InvalidParam(format!("stage {i} changes width without a merge")));
            } else {
                None
            };
            let ws = cfg.window.min(side);
            if side % ws != 0 {
                return Err(Error::InvalidParam(format!("window {ws} does not tile stage {i} grid {side}")));
            }
            let shift = if ws < side { ws / 2 } else { 0 };
            let mut blocks = Vec::new();
            for p in 0..s.pairs {
                let bn = format!("{name}.s{i}.b{p}");
                blocks.push(WindowBlock::new(store, &format!("{bn}.w"), s.dim, s.heads, ws, 0, cfg.mlp_ratio)?);
                if cfg.dwsa_stage == Some(i) {
                    let d = DwSaConfig {
                        window: ws,
                        shift,
                        upsample_r: cfg.dwsa_upsample_r,
                        heads: cfg.dwsa_heads,
                        offset_clamp: cfg.offset_clamp,
                    };
                    blocks.push(WindowBlock::new_dwsa(store, &format!("{bn}.dw"), s.dim, &d, cfg.mlp_ratio)?);
                } else {
                    blocks.push(WindowBlock::new(store, &format!("{bn}.sw"), s.dim, s.heads, ws, shift, cfg.mlp_ratio)?);
                }
            }
            stages.push(Stage { merge, blocks, dim: s.dim });
            prev = s.dim;
        }
        Ok(CoarseExtractor {
            cfg: cfg.clone(),
            channels,
            patch_w,
            patch_b,
            patch_ln,
            final_ln: LayerNorm::new(store, &format!("{name}.final.ln"), prev),
            head: Linear::new(store, &format!("{name}.head"), prev, cfg.out_dim),
            stages,
        })
    }

    /// `frames: [f, c, input, input]` → `[f, out_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frames: Var) -> Result<Var> {
        let s = g.shape(frames).to_vec();
        if s.len() != 4 || s[1] != self.channels || s[2] != self.cfg.input || s[3] != self.cfg.input {
            return Err(Error::Shape(format!(
                "coarse branch expects [f, {0}, {1}, {1}], got {s:?}",
                self.channels, self.cfg.input
            )));
        }
        let w = g.param(store, self.patch_w);
        let b = g.param(store, self.patch_b);
        let x = g.conv2d(frames, w, self.cfg.patch, 0)?;
        let x = g.add_axis(x, b, 1)?;
        let (n, c0, h, wd) = {
            let s = g.shape(x);
            (s[0], s[1], s[2], s[3])
        };
        // channel-major to token rows
        let mut idx = Vec::with_capacity(n * h * wd * c0);
        for bi in 0..n {
            for p in 0..h * wd {
                for ch in 0..c0 {
                    idx.push((bi * c0 + ch) * h * wd + p);
                }
            }
        }
        let x = g.gather(x, idx.into(), &[n * h * wd, c0])?;
        let mut x = self.patch_ln.forward(g, store, x)?;
        let mut grid = Grid { b: n, h, w: wd };
        for st in &self.stages {
            if let Some((ln, lin)) = &st.merge {
                let (x2, g2) = patch_merge(g, x, grid)?;
                let x2 = ln.forward(g, store, x2)?;
                x = lin.forward(g, store, x2)?;
                grid = g2;
            }
            for blk in &st.blocks {
                x = blk.forward(g, store, x, grid)?;
            }
            debug_assert_eq!(g.shape(x)[1], st.dim);
        }
        let x = self.final_ln.forward(g, store, x)?;
        let per_frame: Arc<[Vec<usize>]> = (0..n).map(|b| (b * grid.h * grid.w..(b + 1) * grid.h * grid.w).collect()).collect();
        let pooled = g.group_mean(x, per_frame)?;
        self.head.forward(g, store, pooled)
    }

    /// The deformable blocks, in order.
    pub fn dwsa_blocks(&self) -> Vec<&WindowBlock> {
        self.stages.iter().flat_map(|s| &s.blocks).filter(|b| b.dwsa.is_some()).collect()
    }
}

/// 2×2 neighbourhood concatenation, `[b·h·w, c] → [b·(h/2)·(w/2), 4c]`.
fn patch_merge(g: &mut Graph, x: Var, grid: Grid) -> Result<(Var, Grid)> {
    let c = g.shape(x)[1];
    let out = Grid { b: grid.b, h: grid.h / 2, w: grid.w / 2 };
    let mut idx = Vec::with_capacity(grid.rows() * c);
    for b in 0..grid.b {
        for y in 0..out.h {
            for xx in 0..out.w {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let r = grid.row(b, 2 * y + dy, 2 * xx + dx);
                    idx.extend(r * c..r * c + c);
                }
            }
        }
    }
    Ok((g.gather(x, idx.into(), &[out.rows(), 4 * c])?, out))
}

struct ResBlock {
    c1: (ParamId, ParamId),
    c2: (ParamId, ParamId),
    skip: (ParamId, ParamId),
}

/// Small residual CNN at native resolution.
pub struct FineExtractor {
    pub cfg: FineConfig,
    channels: usize,
    stem: (ParamId, ParamId),
    blocks: Vec<ResBlock>,
    head: Linear,
}

fn conv_params(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize) -> (ParamId, ParamId) {
    let fan = cin * k * k;
    (
        store.add_uniform(&format!("{name}.w"), &[cout, cin, k, k], fan),
        store.add_uniform(&format!("{name}.b"), &[cout], fan),
    )
}

fn conv(g: &mut Graph, store: &ParamStore, x: Var, p: (ParamId, ParamId), stride: usize) -> Result<Var> {
    let w = g.param(store, p.0);
    let b = g.param(store, p.1);
    let k = g.shape(w)[2];
    let y = g.conv2d(x, w, stride, k / 2)?;
    g.add_axis(y, b, 1)
}

impl FineExtractor {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FineConfig, channels: usize) -> Self {
        let stem = conv_params(store, &format!("{name}.stem"), cfg.stem, channels, 3);
        let mut prev = cfg.stem;
        let mut blocks = Vec::new();
        for (i, &c) in cfg.blocks.iter().enumerate() {
            blocks.push(ResBlock {
                c1: conv_params(store, &format!("{name}.r{i}.c1"), c, prev, 3),
                c2: conv_params(store, &format!("{name}.r{i}.c2"), c, c, 3),
                skip: conv_params(store, &format!("{name}.r{i}.skip"), c, prev, 1),
            });
            prev = c;
        }
        FineExtractor {
            cfg: cfg.clone(),
            channels,
            stem,
            blocks,
            head: Linear::new(store, &format!("{name}.head"), prev, cfg.out_dim),
        }
    }

    /// `frames: [f, c, h, w]` → `[f, out_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frames: Var) -> Result<Var> {
        let s = g.shape(frames).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Shape(format!("fine branch expects [f, {}, h, w], got {s:?}", self.channels)));
        }
        let x = conv(g, store, frames, self.stem, 2)?;
        let mut x = g.relu(x);
        for blk in &self.blocks {
            let y = conv(g, store, x, blk.c1, 2)?;
            let y = g.relu(y);
            let y = conv(g, store, y, blk.c2, 1)?;
            let sk = conv(g, store, x, blk.skip, 2)?;
            let y = g.add(y, sk)?;
            x = g.relu(y);
        }
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let pooled = g.mean_axis(x, 2)?;
        self.head.forward(g, store, pooled)
    }
}

/// Row-wise concatenation `[coarse ‖ fine]`.
pub fn fuse_spatial(g: &mut Graph, coarse: Var, fine: Var) -> Result<Var> {
    if g.shape(coarse)[0] != g.shape(fine)[0] {
        return Err(Error::Shape(format!(
            "{} coarse rows vs {} fine rows",
            g.shape(coarse)[0],
            g.shape(fine)[0]
        )));
    }
    g.concat(&[coarse, fine], 1)
}

/// Both spatial branches.
pub struct Ihsm {
    pub coarse: CoarseExtractor,
    pub fine: FineExtractor,
}

impl Ihsm {
    pub fn new(store: &mut ParamStore, coarse: &CoarseConfig, fine: &FineConfig, channels: usize) -> Result<Self> {
        Ok(Ihsm {
            coarse: CoarseExtractor::new(store, "coarse", coarse, channels)?,
            fine: FineExtractor::new(store, "fine", fine, channels),
        })
    }

    pub fn dim(&self) -> usize {
        self.coarse.cfg.out_dim + self.fine.cfg.out_dim
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, coarse_frames: Var, fine_frames: Var) -> Result<Var> {
        let c = self.coarse.forward(g, store, coarse_frames)?;
        let f = self.fine.forward(g, store, fine_frames)?;
        fuse_spatial(g, c, f)
    }
}

/// Channel-major `[f, c, h, w]` tensor of a video, optionally resized.
pub fn video_to_tensor(v: &VideoTensor, size: Option<usize>) -> Tensor {
    let (h, w, c) = v.dims();
    let (oh, ow) = size.map_or((h, w), |s| (s, s));
    let mut data = Vec::with_capacity(v.len() * c * oh * ow);
    for f in &v.frames {
        let f = if (oh, ow) == (h, w) { f.clone() } else { resize_frame(f, oh, ow) };
        for ch in 0..c {
            data.extend(f.data.iter().skip(ch).step_by(c));
        }
    }
    Tensor::from_vec(&[v.len(), c, oh, ow], data)
}

/// Writes `features.json` (rows, cols) and `features.bin` (little-endian f64).
pub fn write_features(dir: &Path, features: &Tensor) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (rows, cols) = (features.shape[0], features.len() / features.shape[0].max(1));
    let manifest = serde_json::json!({ "rows": rows, "cols": cols, "dtype": "f64le" });
    let p = dir.join("features.json");
    fs::write(&p, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&p, e))?;
    let bytes: Vec<u8> = features.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    let p = dir.join("features.bin");
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
}
