//! The full quality model: preprocessing, spatial features, segmentation
//! and the temporal passes, plus checkpoint I/O.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::igtm::{aggregate, align_levels, fixed_segments, segment_ranges, Igtm, IgtmOutput, TemporalConfig};
use crate::ihsm::{video_to_tensor, CoarseConfig, FineConfig, Ihsm};
use crate::inconsistency::{analyze, highlight, memory_threshold, InconsistencyConfig, LevelStats};
use crate::media::{to_grayscale, Frame, VideoTensor};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub inconsistency: InconsistencyConfig,
    pub coarse: CoarseConfig,
    pub fine: FineConfig,
    pub temporal: TemporalConfig,
    /// 1 for luma input, 3 for RGB.
    pub channels: usize,
    /// Largest segment threshold, used for the least inconsistent video.
    pub tau: f64,
    /// Threshold drop between the least and most inconsistent videos.
    pub eta: f64,
    /// Feed highlighted frames to the extractors; raw frames otherwise.
    pub guidance: bool,
    /// Replace capacity segmentation with fixed-length segments.
    pub fixed_segments: Option<usize>,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            inconsistency: InconsistencyConfig::default(),
            coarse: CoarseConfig::default(),
            fine: FineConfig::default(),
            temporal: TemporalConfig::default(),
            channels: 3,
            tau: 5.0,
            eta: 4.0,
            guidance: true,
            fixed_segments: None,
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidParam(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !(self.tau > self.eta && self.eta >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "need tau > eta >= 0 for a positive threshold, got tau {} eta {}",
                self.tau, self.eta
            )));
        }
        if self.fixed_segments == Some(0) {
            return Err(Error::InvalidParam("fixed segment length must be positive".into()));
        }
        self.train.validate()
    }

    /// Settings that change preprocessed inputs.
    fn fingerprint(&self) -> String {
        serde_json::json!({
            "inconsistency": self.inconsistency,
            "coarse_input": self.coarse.input,
            "channels": self.channels,
            "guidance": self.guidance,
        })
        .to_string()
    }
}

/// Model inputs for one clip, computed once before training.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedClip {
    pub id: String,
    pub mos: f64,
    /// `[F, c, s, s]` at the coarse input size.
    pub coarse: Tensor,
    /// `[F, c, h, w]` at native size.
    pub fine: Tensor,
    pub frame_levels: Vec<f64>,
    pub video_level: f64,
}

impl PreparedClip {
    pub fn frames(&self) -> usize {
        self.coarse.shape[0]
    }

    fn write(&self, path: &Path, fingerprint: &str) -> Result<()> {
        let header = serde_json::json!({
            "fingerprint": fingerprint,
            "id": self.id,
            "mos": self.mos,
            "coarse": self.coarse.shape,
            "fine": self.fine.shape,
            "frame_levels": self.frame_levels,
            "video_level": self.video_level,
        });
        let mut buf = serde_json::to_vec(&header)?;
        buf.push(b'\n');
        for v in self.coarse.data.iter().chain(&self.fine.data) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// `None` when the file was written with different settings.
    fn read(path: &Path, fingerprint: &str) -> Result<Option<Self>> {
        #[derive(Deserialize)]
        struct Header {
            fingerprint: String,
            id: String,
            mos: f64,
            coarse: Vec<usize>,
            fine: Vec<usize>,
            frame_levels: Vec<f64>,
            video_level: f64,
        }
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let h: Header = serde_json::from_str(&line)?;
        if h.fingerprint != fingerprint {
            return Ok(None);
        }
        let (nc, nf) = (h.coarse.iter().product::<usize>(), h.fine.iter().product::<usize>());
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() != 8 * (nc + nf) {
            return Err(Error::Format(format!("{} is truncated", path.display())));
        }
        let vals: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        Ok(Some(PreparedClip {
            id: h.id,
            mos: h.mos,
            coarse: Tensor::from_vec(&h.coarse, vals[..nc].to_vec()),
            fine: Tensor::from_vec(&h.fine, vals[nc..].to_vec()),
            frame_levels: h.frame_levels,
            video_level: h.video_level,
        }))
    }
}

fn with_channels(v: &VideoTensor, channels: usize) -> VideoTensor {
    match (v.dims().2, channels) {
        (3, 1) => to_grayscale(v),
        (1, 3) => VideoTensor {
            frames: v
                .frames
                .iter()
                .map(|f| Frame::new(f.h, f.w, 3, f.data.iter().flat_map(|&x| [x, x, x]).collect()))
                .collect(),
            ..v.clone()
        },
        _ => v.clone(),
    }
}

pub fn prepare_clip(id: &str, mos: f64, reference: &VideoTensor, distorted: &VideoTensor, cfg: &PipelineConfig) -> Result<PreparedClip> {
    let b = analyze(reference, distorted, &cfg.inconsistency)?;
    let dist = with_channels(distorted, cfg.channels);
    let (coarse_v, fine_v) = if cfg.guidance {
        (highlight(&dist, &b.vi_coarse)?, highlight(&dist, &b.vi_fine)?)
    } else {
        (dist.clone(), dist)
    };
    Ok(PreparedClip {
        id: id.to_string(),
        mos,
        coarse: video_to_tensor(&coarse_v, Some(cfg.coarse.input)),
        fine: video_to_tensor(&fine_v, None),
        frame_levels: b.frame_levels,
        video_level: b.video_level,
    })
}

/// One reference/distorted pair to prepare.
pub struct ClipSource<'a> {
    pub id: &'a str,
    pub mos: f64,
    pub reference: &'a VideoTensor,
    pub distorted: &'a VideoTensor,
}

/// Prepares clips on `jobs` threads, reusing and filling `cache` when given.
/// Results keep the input order.
pub fn prepare_all(sources: &[ClipSource], cfg: &PipelineConfig, jobs: usize, cache: Option<&Path>) -> Result<Vec<PreparedClip>> {
    if let Some(dir) = cache {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fp = cfg.fingerprint();
    let work = |s: &ClipSource| -> Result<PreparedClip> {
        let path = cache.map(|d| d.join(format!("{}.prep", s.id)));
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            if let Some(c) = PreparedClip::read(p, &fp)? {
                return Ok(c);
            }
        }
        let c = prepare_clip(s.id, s.mos, s.reference, s.distorted, cfg)?;
        if let Some(p) = &path {
            c.write(p, &fp)?;
        }
        Ok(c)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParam(format!("thread pool: {e}")))?;
    pool.install(|| sources.par_iter().map(work).collect())
}

/// Scores of one video with the segmentation that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub s1: f64,
    pub s2: f64,
    pub s: f64,
    pub segments: Vec<[usize; 2]>,
    /// Absent for fixed-length segments.
    pub threshold: Option<f64>,
}

pub struct QualityModel {
    pub cfg: PipelineConfig,
    pub stats: LevelStats,
    pub store: ParamStore,
    pub ihsm: Ihsm,
    pub igtm: Igtm,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: PipelineConfig,
    stats: LevelStats,
    epoch: usize,
}

impl QualityModel {
    /// Fresh parameters drawn from `cfg.train.seed`.
    pub fn new(cfg: &PipelineConfig, stats: LevelStats) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.train.seed);
        let ihsm = Ihsm::new(&mut store, &cfg.coarse, &cfg.fine, cfg.channels)?;
        let igtm = Igtm::new(&mut store, ihsm.dim(), &cfg.temporal)?;
        Ok(QualityModel { cfg: cfg.clone(), stats, store, ihsm, igtm })
    }

    /// Segments and, for capacity segmentation, the threshold used.
    pub fn segments(&self, clip: &PreparedClip) -> Result<(Vec<Range<usize>>, Option<f64>)> {
        let f = clip.frames();
        if let Some(len) = self.cfg.fixed_segments {
            return Ok((fixed_segments(f, len)?, None));
        }
        let t = memory_threshold(clip.video_level, self.stats.min, self.stats.max, self.cfg.tau, self.cfg.eta);
        Ok((segment_ranges(&align_levels(&clip.frame_levels, f)?, t)?, Some(t)))
    }

    /// Records the whole batch in `g`; frames of all clips share one pass
    /// through the extractors.
    pub fn forward(&self, g: &mut Graph, clips: &[&PreparedClip]) -> Result<Vec<IgtmOutput>> {
        if clips.is_empty() {
            return Err(Error::InvalidParam("empty batch".into()));
        }
        let stack = |pick: fn(&PreparedClip) -> &Tensor| {
            let mut shape = pick(clips[0]).shape.clone();
            shape[0] = clips.iter().map(|c| pick(c).shape[0]).sum();
            let data = clips.iter().flat_map(|c| pick(c).data.iter().copied()).collect();
            Tensor::new(&shape, data)
        };
        let coarse = g.input(stack(|c| &c.coarse)?);
        let fine = g.input(stack(|c| &c.fine)?);
        let feats = self.ihsm.forward(g, &self.store, coarse, fine)?;
        if g.value(feats).data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite frame features".into()));
        }
        let mut out = Vec::with_capacity(clips.len());
        let mut offset = 0;
        for c in clips {
            let (segs, _) = self.segments(c)?;
            let agg = aggregate(g, feats, &segs, offset)?;
            out.push(self.igtm.forward(g, &self.store, agg)?);
            offset += c.frames();
        }
        Ok(out)
    }

    /// Scores stacked as one `[batch]` node.
    pub fn scores(&self, g: &mut Graph, outs: &[IgtmOutput]) -> Result<Var> {
        let s: Vec<Var> = outs.iter().map(|o| o.score).collect();
        g.concat(&s, 0)
    }

    pub fn predict(&self, clips: &[&PreparedClip]) -> Result<Vec<PredictionRecord>> {
        let mut g = Graph::new();
        let outs = self.forward(&mut g, clips)?;
        clips
            .iter()
            .zip(outs)
            .map(|(c, o)| {
                let (segs, threshold) = self.segments(c)?;
                let rec = PredictionRecord {
                    video_id: c.id.clone(),
                    s1: g.value(o.s1).item(),
                    s2: g.value(o.s2).item(),
                    s: g.value(o.score).item(),
                    segments: segs.iter().map(|r| [r.start, r.end]).collect(),
                    threshold,
                };
                if !rec.s.is_finite() {
                    return Err(Error::Numeric(format!("non-finite score for {}", c.id)));
                }
                Ok(rec)
            })
            .collect()
    }

    /// Predictions in batches of the configured size.
    pub fn predict_all(&self, clips: &[PreparedClip]) -> Result<Vec<PredictionRecord>> {
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(self.cfg.train.batch.max(1)) {
            out.extend(self.predict(&chunk.iter().collect::<Vec<_>>())?);
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path, epoch: usize) -> Result<()> {
        self.store.save(dir, epoch)?;
        let meta = ModelMeta { config: self.cfg.clone(), stats: self.stats, epoch };
        let p = dir.join("model.json");
        fs::write(&p, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&p, e))
    }

    /// Returns the model and the epoch it was saved at.
    pub fn load(dir: &Path) -> Result<(Self, usize)> {
        let p = dir.join("model.json");
        if !p.exists() {
            return Err(Error::MissingPath(p));
        }
        let text = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let meta: ModelMeta = serde_json::from_slice(&text)?;
        let mut m = QualityModel::new(&meta.config, meta.stats)?;
        m.store.load(dir)?;
        Ok((m, meta.epoch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ihsm::StageConfig;
    use crate::synth::{gen_pair, SynthSpec};

    pub(crate) fn tiny_config() -> PipelineConfig {
        let mut cfg = PipelineConfig { channels: 1, ..Default::default() };
        cfg.coarse = CoarseConfig {
            input: 16,
            patch: 4,
            window: 2,
            mlp_ratio: 2,
            stages: vec![StageConfig { dim: 4, heads: 1, pairs: 1, merge: false }],
            dwsa_stage: Some(0),
            dwsa_upsample_r: 1,
            dwsa_heads: 1,
            offset_clamp: 1.0,
            out_dim: 4,
        };
        cfg.fine = FineConfig { stem: 2, blocks: vec![4], out_dim: 4 };
        cfg.temporal = TemporalConfig { d_gat: 4, d_hidden: 4, ..Default::default() };
        cfg
    }

    fn clip(amp: f64) -> PreparedClip {
        let spec = SynthSpec { frames: 6, h: 24, w: 24, jitter_amp: amp, seed: 4, ..Default::default() };
        let c = gen_pair(&spec).unwrap();
        prepare_clip(&c.id, c.mos, &c.reference, &c.distorted, &tiny_config()).unwrap()
    }

    #[test]
    fn identical_pair_prepares_raw_frames() {
        let c = clip(0.0);
        assert_eq!(c.frame_levels, vec![0.0; 5]);
        assert_eq!(c.video_level, 0.0);
        assert_eq!(c.coarse.shape, vec![6, 1, 16, 16]);
        assert_eq!(c.fine.shape, vec![6, 1, 24, 24]);
    }

    #[test]
    fn prediction_is_consistent_and_deterministic() {
        let m = QualityModel::new(&tiny_config(), LevelStats { min: 0.0, max: 1.0 }).unwrap();
        let clips = [clip(0.0), clip(2.0)];
        let a = m.predict_all(&clips).unwrap();
        let b = m.predict_all(&clips).unwrap();
        assert_eq!(a, b);
        for r in &a {
            assert!((0.0..=1.0).contains(&r.s));
            assert!((r.s - (0.5 * r.s1 + 0.5 * r.s2)).abs() < 1e-12);
            assert_eq!(r.segments.first().unwrap()[0], 0);
            assert_eq!(r.segments.last().unwrap()[1], 6);
        }
        // batching does not change a clip's score
        let single = m.predict_all(&clips[1..]).unwrap();
        assert!((single[0].s - a[1].s).abs() < 1e-12);
    }

    #[test]
    fn fixed_segments_have_no_threshold() {
        let cfg = PipelineConfig { fixed_segments: Some(4), ..tiny_config() };
        let m = QualityModel::new(&cfg, LevelStats { min: 0.0, max: 1.0 }).unwrap();
        let (segs, t) = m.segments(&clip(1.0)).unwrap();
        assert_eq!(segs, vec![0..4, 4..6]);
        assert_eq!(t, None);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = QualityModel::new(&tiny_config(), LevelStats { min: 0.1, max: 0.7 }).unwrap();
        m.save(dir.path(), 3).unwrap();
        let (back, epoch) = QualityModel::load(dir.path()).unwrap();
        assert_eq!(epoch, 3);
        assert_eq!(back.stats, m.stats);
        let c = [clip(1.0)];
        assert_eq!(back.predict_all(&c).unwrap(), m.predict_all(&c).unwrap());
    }

    #[test]
    fn cache_round_trip_and_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let c = clip(1.0);
        let p = dir.path().join("x.prep");
        c.write(&p, "a").unwrap();
        assert_eq!(PreparedClip::read(&p, "a").unwrap(), Some(c));
        assert_eq!(PreparedClip::read(&p, "b").unwrap(), None);
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig { channels: 2, ..tiny_config() }.validate().is_err());
        assert!(PipelineConfig { tau: 1.0, eta: 4.0, ..tiny_config() }.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }
}
