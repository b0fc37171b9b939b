//! Inconsistency-guided temporal modelling.
//!
//! Frame features are grouped into segments whose summed inconsistency
//! reaches a per-video threshold, each segment is summarised by its mean and
//! standard deviation, and the segment sequence goes through a graph
//! attention layer and a GRU. A second pass over the most attended hidden
//! states gives another score, and the two are blended.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inconsistency::mean_std;
use crate::nn::{Graph, Gru, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    pub segments: Vec<Range<usize>>,
    /// `n_segments × 2d`: per-segment mean followed by population std.
    pub aggregated: Tensor,
}

/// Extends `F - 1` pair levels to `F` frames by repeating the last one.
/// Levels already of length `frames` are returned unchanged.
pub fn align_levels(levels: &[f64], frames: usize) -> Result<Vec<f64>> {
    if levels.len() == frames {
        return Ok(levels.to_vec());
    }
    if levels.is_empty() || levels.len() + 1 != frames {
        return Err(Error::Shape(format!("{} levels for {frames} frames", levels.len())));
    }
    let mut out = levels.to_vec();
    out.push(*levels.last().unwrap());
    Ok(out)
}

/// Greedy capacity segmentation: accumulate levels frame by frame and close
/// the segment once the running sum reaches `threshold`. A trailing partial
/// segment is kept.
pub fn segment_ranges(levels: &[f64], threshold: f64) -> Result<Vec<Range<usize>>> {
    if levels.is_empty() {
        return Err(Error::InvalidParam("no frames to segment".into()));
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidParam(format!("threshold {threshold} must be positive")));
    }
    let mut out = Vec::new();
    let (mut start, mut acc) = (0, 0.0);
    for (i, &l) in levels.iter().enumerate() {
        acc += l;
        if acc >= threshold {
            out.push(start..i + 1);
            start = i + 1;
            acc = 0.0;
        }
    }
    if start < levels.len() {
        out.push(start..levels.len());
    }
    Ok(out)
}

/// Consecutive chunks of `len` frames; the last may be shorter.
pub fn fixed_segments(frames: usize, len: usize) -> Result<Vec<Range<usize>>> {
    if frames == 0 || len == 0 {
        return Err(Error::InvalidParam("fixed segments need frames and a positive length".into()));
    }
    Ok((0..frames).step_by(len).map(|s| s..(s + len).min(frames)).collect())
}

fn range_groups(segments: &[Range<usize>], offset: usize) -> Arc<[Vec<usize>]> {
    segments.iter().map(|r| (r.start + offset..r.end + offset).collect()).collect()
}

/// `[mean ‖ std]` of rows `offset + r` for each segment `r`.
pub fn aggregate(g: &mut Graph, features: Var, segments: &[Range<usize>], offset: usize) -> Result<Var> {
    let groups = range_groups(segments, offset);
    let m = g.group_mean(features, groups.clone())?;
    let s = g.group_std(features, groups)?;
    g.concat(&[m, s], 1)
}

pub fn capacity_segment(features: &Tensor, levels: &[f64], threshold: f64) -> Result<SegmentSet> {
    if features.rank() != 2 || features.shape[0] == 0 {
        return Err(Error::Shape(format!("features must be a nonempty matrix, got {:?}", features.shape)));
    }
    let levels = align_levels(levels, features.shape[0])?;
    let segments = segment_ranges(&levels, threshold)?;
    let d = features.shape[1];
    let mut agg = Vec::with_capacity(segments.len() * 2 * d);
    for r in &segments {
        let stats: Vec<(f64, f64)> = (0..d)
            .map(|c| mean_std(&r.clone().map(|i| features.data[i * d + c]).collect::<Vec<_>>()))
            .collect();
        agg.extend(stats.iter().map(|s| s.0));
        agg.extend(stats.iter().map(|s| s.1));
    }
    Ok(SegmentSet {
        aggregated: Tensor::from_vec(&[segments.len(), 2 * d], agg),
        segments,
    })
}

/// Cosine top-`k` neighbours (self excluded) plus self-loops, symmetrised by
/// union. Rows with zero norm link to their temporal neighbours instead.
/// Row-major `n × n` 0/1 mask.
pub fn build_adjacency(nodes: &Tensor, k: usize) -> Vec<bool> {
    let n = nodes.shape[0];
    let d = nodes.len() / n.max(1);
    let norms: Vec<f64> = (0..n).map(|i| nodes.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut adj = vec![false; n * n];
    let mut link = |i: usize, j: usize| {
        adj[i * n + j] = true;
        adj[j * n + i] = true;
    };
    for i in 0..n {
        link(i, i);
        if norms[i] == 0.0 {
            if i > 0 {
                link(i, i - 1);
            }
            if i + 1 < n {
                link(i, i + 1);
            }
            continue;
        }
        let mut sims: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i && norms[j] > 0.0)
            .map(|j| {
                let dot: f64 = (0..d).map(|c| nodes.data[i * d + c] * nodes.data[j * d + c]).sum();
                (j, dot / (norms[i] * norms[j]))
            })
            .collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(j, _) in sims.iter().take(k) {
            link(i, j);
        }
    }
    adj
}

/// Neighbour count used by the temporal model.
pub fn default_k(n: usize) -> usize {
    3.min(n.saturating_sub(1)).max(1)
}

#[derive(Debug, Clone)]
pub struct GatLayer {
    pub w: ParamId,
    pub a: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub slope: f64,
}

impl GatLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        GatLayer {
            w: store.add_uniform(&format!("{name}.w"), &[d_in, d_out], d_in),
            a: store.add_uniform(&format!("{name}.a"), &[2 * d_out], d_out),
            d_in,
            d_out,
            slope: 0.2,
        }
    }

    /// Returns `(ELU(α·Wh), α)` for nodes `x: [n, d_in]` and mask `adj`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, adj: &[bool]) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.d_in {
            return Err(Error::Shape(format!("graph layer expects [n, {}], got {s:?}", self.d_in)));
        }
        let n = s[0];
        if adj.len() != n * n {
            return Err(Error::Shape(format!("adjacency of {} entries for {n} nodes", adj.len())));
        }
        if (0..n).any(|i| !adj[i * n + i]) {
            return Err(Error::InvalidParam("every node needs a self-loop".into()));
        }
        let w = g.param(store, self.w);
        let a = g.param(store, self.a);
        let wh = g.matmul(x, w)?;
        let a_src = g.slice(a, 0, 0, self.d_out)?;
        let a_src = g.reshape(a_src, &[self.d_out, 1])?;
        let a_dst = g.slice(a, 0, self.d_out, self.d_out)?;
        let a_dst = g.reshape(a_dst, &[self.d_out, 1])?;
        let s_src = g.matmul(wh, a_src)?;
        let s_dst = g.matmul(wh, a_dst)?;
        let rows: Arc<[usize]> = (0..n * n).map(|p| p / n).collect();
        let cols: Arc<[usize]> = (0..n * n).map(|p| p % n).collect();
        let e_src = g.gather(s_src, rows, &[n, n])?;
        let e_dst = g.gather(s_dst, cols, &[n, n])?;
        let e = g.add(e_src, e_dst)?;
        let e = g.leaky_relu(e, self.slope);
        let att = g.softmax(e, Some(adj))?;
        let h = g.matmul(att, wh)?;
        Ok((g.elu(h), att))
    }
}

#[derive(Debug, Clone)]
pub struct TemporalModel {
    pub gat: GatLayer,
    pub gru: Gru,
    pub head: Linear,
}

impl TemporalModel {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_gat: usize, d_h: usize) -> Self {
        TemporalModel {
            gat: GatLayer::new(store, &format!("{name}.gat"), d_in, d_gat),
            gru: Gru::new(store, &format!("{name}.gru"), d_gat, d_h),
            head: Linear::new(store, &format!("{name}.head"), d_h, 1),
        }
    }

    /// Nodes `[n, d_in]` → (hidden `[n, d_h]`, score `[1]` in `[0, 1]`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, nodes: Var) -> Result<(Var, Var)> {
        let n = g.shape(nodes)[0];
        let adj = build_adjacency(g.value(nodes), default_k(n));
        let (h, _) = self.gat.forward(g, store, nodes, &adj)?;
        let hidden = self.gru.sequence(g, store, h)?;
        let pooled = g.mean_axis(hidden, 0)?;
        let pooled = g.reshape(pooled, &[1, self.gru.d_h])?;
        let s = self.head.forward(g, store, pooled)?;
        let s = g.sigmoid(s);
        Ok((hidden, g.reshape(s, &[1])?))
    }
}

/// Indices of the `max(1, ⌈ratio·n⌉)` hidden states that receive the most
/// self-attention, in temporal order. Ties go to the earlier index.
pub fn informative_indices(hidden: &Tensor, ratio: f64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidParam(format!("filter ratio {ratio} outside (0, 1]")));
    }
    let imp = importance(hidden);
    let n = imp.len();
    let k = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| imp[b].total_cmp(&imp[a]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Column means of `softmax(H·Hᵀ / √d)`.
pub fn importance(hidden: &Tensor) -> Vec<f64> {
    let n = hidden.shape[0];
    let d = hidden.len() / n.max(1);
    let scale = 1.0 / (d as f64).sqrt();
    let mut imp = vec![0.0; n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| hidden.row(i).iter().zip(hidden.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            imp[j] += e[j] / z / n as f64;
        }
    }
    imp
}

/// Keeps the informative rows of `hidden: [n, d]`.
pub fn informative_filter(g: &mut Graph, hidden: Var, ratio: f64) -> Result<(Var, Vec<usize>)> {
    let keep = informative_indices(g.value(hidden), ratio)?;
    let d = g.shape(hidden)[1];
    let idx: Arc<[usize]> = keep.iter().flat_map(|&r| r * d..(r + 1) * d).collect();
    Ok((g.gather(hidden, idx, &[keep.len(), d])?, keep))
}

pub fn fuse_scores(s1: f64, s2: f64, gamma: f64) -> f64 {
    gamma * s1 + (1.0 - gamma) * s2
}

/// Sizes of the two temporal passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalConfig {
    pub d_gat: usize,
    pub d_hidden: usize,
    pub filter_ratio: f64,
    pub gamma: f64,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig { d_gat: 32, d_hidden: 32, filter_ratio: 0.5, gamma: 0.5 }
    }
}

/// Both temporal passes with independent parameters.
#[derive(Debug, Clone)]
pub struct Igtm {
    pub stage1: TemporalModel,
    pub stage2: TemporalModel,
    pub cfg: TemporalConfig,
}

/// Scores of one video, as graph nodes plus what was selected.
pub struct IgtmOutput {
    pub s1: Var,
    pub s2: Var,
    pub score: Var,
    pub kept: Vec<usize>,
}

impl Igtm {
    pub fn new(store: &mut ParamStore, d_feat: usize, cfg: &TemporalConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.gamma) {
            return Err(Error::InvalidParam(format!("gamma {} outside [0, 1]", cfg.gamma)));
        }
        Ok(Igtm {
            stage1: TemporalModel::new(store, "t1", 2 * d_feat, cfg.d_gat, cfg.d_hidden),
            stage2: TemporalModel::new(store, "t2", cfg.d_hidden, cfg.d_gat, cfg.d_hidden),
            cfg: cfg.clone(),
        })
    }

    /// `aggregated: [n_segments, 2·d_feat]` → fused score.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, aggregated: Var) -> Result<IgtmOutput> {
        let (hidden, s1) = self.stage1.forward(g, store, aggregated)?;
        let (kept_rows, kept) = informative_filter(g, hidden, self.cfg.filter_ratio)?;
        let (_, s2) = self.stage2.forward(g, store, kept_rows)?;
        let a = g.scale(s1, self.cfg.gamma);
        let b = g.scale(s2, 1.0 - self.cfg.gamma);
        let score = g.add(a, b)?;
        Ok(IgtmOutput { s1, s2, score, kept })
    }
}
