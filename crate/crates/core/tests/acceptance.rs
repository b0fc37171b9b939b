//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 10 and 11 train 10 models and dominate the runtime.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use tiqa::flow::{block_match_flow, farneback_flow, FarnebackParams};
use tiqa::igtm::{capacity_segment, segment_ranges, TemporalConfig};
use tiqa::ihsm::{CoarseConfig, FineConfig, StageConfig};
use tiqa::inconsistency::{analyze, decouple, gaussian_lowpass_mask, highlight, memory_threshold, InconsistencyConfig};
use tiqa::metrics::{krcc, plcc, rmse, srcc};
use tiqa::model::{prepare_all, ClipSource, PipelineConfig, PreparedClip};
use tiqa::nn::Tensor;
use tiqa::synth::{gen_dataset, gen_pair, LabeledClip, Pattern, SynthSpec};
use tiqa::train::{evaluate, split_dataset, train, Split};

use common::{random_video, rng, shifted_pair, PATTERNS};

const AMPS: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 4.0];
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Outcome = tiqa::Result<(bool, String)>;

struct Runner {
    failed: Vec<usize>,
}

impl Runner {
    fn run(&mut self, id: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let t0 = Instant::now();
        let res = f();
        let dt = t0.elapsed();
        let (ok, detail) = match res {
            Ok((ok, d)) => (ok, d),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = budget.map_or(true, |b| dt <= b);
        let ok = ok && in_time;
        let time = match budget {
            Some(b) => format!("{:.1}s of {:.0}s", dt.as_secs_f64(), b.as_secs_f64()),
            None => format!("{:.1}s", dt.as_secs_f64()),
        };
        println!("criterion {id:>2} {name}: {} ({detail}; {time})", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(id);
        }
    }
}

fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

fn flow_oracle() -> Outcome {
    let p = FarnebackParams::default();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut r = rng(1000 + seed);
        let (sx, sy) = (r.gen_range(-3.0..=3.0), r.gen_range(-3.0..=3.0));
        let (a, b) = shifted_pair(PATTERNS[seed as usize % 3], 64, sx, sy, seed);
        let f = farneback_flow(&a, &b, &p)?;
        let mut ex = Vec::new();
        let mut ey = Vec::new();
        for (v, &ok) in f.vectors.chunks_exact(2).zip(&f.valid) {
            if ok {
                ex.push((v[0] - sx).abs());
                ey.push((v[1] - sy).abs());
            }
        }
        for e in [&mut ex, &mut ey] {
            e.sort_by(f64::total_cmp);
            worst = worst.max(e.get(e.len() / 2).copied().unwrap_or(f64::INFINITY));
        }
    }
    let mut r = rng(77);
    let mut mismatches = 0;
    for seed in 0..20u64 {
        let (sx, sy) = (r.gen_range(-3i32..=3), r.gen_range(-3i32..=3));
        let (a, b) = shifted_pair(PATTERNS[seed as usize % 3], 64, sx as f64, sy as f64, seed);
        let f = block_match_flow(&a, &b, 8, 4)?;
        let valid = f.valid.iter().filter(|&&v| v).count();
        mismatches += (0..64 * 64).filter(|&i| f.valid[i] && f.get(i / 64, i % 64) != (sx as f64, sy as f64)).count();
        if valid == 0 {
            mismatches += 1;
        }
    }
    Ok((worst <= 0.25 && mismatches == 0, format!("worst median error {worst:.4} px, block mismatches {mismatches}")))
}

fn null_case() -> Outcome {
    let cfg = InconsistencyConfig::default();
    let mut ok = true;
    for (k, pattern) in PATTERNS.into_iter().enumerate() {
        let spec = SynthSpec { frames: 6, h: 48, w: 48, pattern, seed: k as u64, jitter_amp: 2.0, ..Default::default() };
        let clip = gen_pair(&spec)?;
        let b = analyze(&clip.distorted, &clip.distorted, &cfg)?;
        ok &= b.vi.iter().flatten().all(|&v| v == 0.0);
        ok &= b.frame_levels.iter().all(|&v| v == 0.0);
        ok &= b.video_level == 0.0;
    }
    Ok((ok, "3 patterns".into()))
}

fn decoupling() -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (h, w) = (r.gen_range(4..=48), r.gen_range(4..=48));
        let mask = gaussian_lowpass_mask(h, w, 0.05)?;
        let scale = r.gen_range(0.1..10.0);
        let maps: Vec<Vec<f64>> = vec![(0..h * w).map(|_| r.gen_range(0.0..scale)).collect()];
        let (c, f) = decouple(&maps, &mask)?;
        for ((m, c), f) in maps[0].iter().zip(&c[0]).zip(&f[0]) {
            worst = worst.max((c + f - m).abs());
        }
    }
    let mask = gaussian_lowpass_mask(40, 40, 0.05)?;
    let d0 = mask.cutoff as i64;
    let dc = (mask.at_frequency(0, 0) - 1.0).abs();
    let at_d0 = (mask.at_frequency(0, d0) - (-0.5f64).exp()).abs();
    Ok((
        worst <= 1e-5 && dc <= 1e-12 && at_d0 <= 1e-12,
        format!("reconstruction {worst:.2e}, |H_L(0)-1| {dc:.1e}, |H_L(D0)-e^-1/2| {at_d0:.1e}"),
    ))
}

fn highlighting() -> Outcome {
    let mut r = rng(6);
    let mut identity = true;
    for _ in 0..50 {
        let v = random_video(&mut r, 4, 6, 7, 3);
        identity &= highlight(&v, &vec![vec![0.0; 42]; 3])? == v;
    }
    let mut in_range = true;
    for _ in 0..1000 {
        let (f, h, w, c) = (r.gen_range(2..=5), r.gen_range(2..=8), r.gen_range(2..=8), [1, 3][r.gen_range(0..2)]);
        let v = random_video(&mut r, f, h, w, c);
        let hi = r.gen_range(0.01..5.0);
        let maps: Vec<Vec<f64>> = (0..f - 1).map(|_| (0..h * w).map(|_| r.gen_range(0.0..hi)).collect()).collect();
        let out = highlight(&v, &maps)?;
        in_range &= out.dims() == v.dims();
        in_range &= out.frames.iter().flat_map(|fr| &fr.data).all(|&s| (0.0..=1.0).contains(&s));
    }
    Ok((identity && in_range, format!("zero-map identity {identity}, range over 1000 videos {in_range}")))
}

fn threshold() -> Outcome {
    let mut r = rng(7);
    let mut ok = true;
    for _ in 0..1000 {
        let mut levels: Vec<f64> = (0..r.gen_range(2..20)).map(|_| r.gen_range(0.0..3.0)).collect();
        levels.sort_by(f64::total_cmp);
        let (lo, hi) = (levels[0], levels[levels.len() - 1]);
        if hi > lo {
            ok &= memory_threshold(lo, lo, hi, 5.0, 4.0) == 5.0;
            ok &= memory_threshold(hi, lo, hi, 5.0, 4.0) == 1.0;
        }
        let ts: Vec<f64> = levels.iter().map(|&l| memory_threshold(l, lo, hi, 5.0, 4.0)).collect();
        ok &= ts.windows(2).all(|p| p[1] <= p[0]);
    }
    Ok((ok, "1000 level sets".into()))
}

fn segmentation() -> Outcome {
    let mut r = rng(11);
    let mut ok = true;
    for _ in 0..1000 {
        let levels: Vec<f64> =
            (0..r.gen_range(1..40)).map(|_| if r.gen_bool(0.15) { 0.0 } else { r.gen_range(0.0..2.0) }).collect();
        let t = r.gen_range(0.05..6.0);
        let segs = segment_ranges(&levels, t)?;
        ok &= segs[0].start == 0 && segs[segs.len() - 1].end == levels.len();
        ok &= segs.windows(2).all(|p| p[0].end == p[1].start) && segs.iter().all(|s| !s.is_empty());
        for (k, s) in segs.iter().enumerate() {
            let sum: f64 = levels[s.clone()].iter().sum();
            let before: f64 = levels[s.start..s.end - 1].iter().sum();
            ok &= before < t && (k + 1 == segs.len() || sum >= t);
        }
        ok &= segment_ranges(&levels, t + r.gen_range(0.0..3.0))?.len() <= segs.len();
    }
    let mut traced = true;
    for frames in [2usize, 4, 16] {
        let expect: Vec<_> = (0..frames / 2).map(|k| 2 * k..2 * k + 2).collect();
        traced &= segment_ranges(&vec![0.5; frames], 1.0)? == expect;
        let feats = Tensor::from_vec(&[frames, 1], (0..frames).map(|i| i as f64).collect());
        traced &= capacity_segment(&feats, &vec![0.5; frames - 1], 1.0)?.segments == expect;
    }
    Ok((ok && traced, format!("1000 sequences {ok}, hand-traced {traced}")))
}

fn gradients() -> Outcome {
    let mut worst: (f64, &str, u64) = (0.0, "", 0);
    let mut cases = 0;
    for seed in 0..50u64 {
        for (name, e) in common::grad_suite(seed)? {
            cases += 1;
            if e > worst.0 || e.is_nan() {
                worst = (e, name, seed);
            }
        }
    }
    Ok((worst.0 <= 1e-4, format!("{cases} checks over 50 seeds, worst {:.2e} ({} seed {})", worst.0, worst.1, worst.2)))
}

fn metrics() -> Outcome {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [1.0, 3.0, 2.0, 5.0, 4.0];
    let s = srcc(&x, &y)?.value;
    let k = krcc(&x, &y)?.value;
    let example = (s - 0.8).abs() <= 1e-12
        && (k - 0.6).abs() <= 1e-12
        && (plcc(&x, &y)?.value - 0.8).abs() <= 1e-12
        && (rmse(&x, &y)? - 0.8f64.sqrt()).abs() <= 1e-12;
    let mut r = rng(21);
    let mut inv = true;
    for _ in 0..100 {
        let n = r.gen_range(3..40);
        let a: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| v + r.gen_range(-1.5..1.5)).collect();
        let (s0, k0, p0) = (srcc(&a, &b)?.value, krcc(&a, &b)?.value, plcc(&a, &b)?.value);
        let up: Vec<f64> = a.iter().map(|v| v.exp() * 3.0 + v.powi(3)).collect();
        let down: Vec<f64> = a.iter().map(|v| -v.powi(5)).collect();
        let (m, c) = (r.gen_range(0.1..10.0), r.gen_range(-5.0..5.0));
        let affine: Vec<f64> = a.iter().map(|v| m * v + c).collect();
        inv &= (srcc(&up, &b)?.value - s0).abs() <= 1e-12 && (krcc(&up, &b)?.value - k0).abs() <= 1e-12;
        inv &= (srcc(&down, &b)?.value + s0).abs() <= 1e-12 && (krcc(&down, &b)?.value + k0).abs() <= 1e-12;
        inv &= (plcc(&affine, &b)?.value - p0).abs() <= 1e-9;
    }
    Ok((example && inv, format!("srcc {s}, krcc {k}, invariances {inv}")))
}

fn dataset_spec(seed: u64) -> SynthSpec {
    SynthSpec { n_clips: 100, frames: 16, h: 48, w: 48, pattern: Pattern::GradientDrift, seed, ..Default::default() }
}

fn level_monotonicity() -> Outcome {
    let cfg = InconsistencyConfig::default();
    let (mut levels, mut amps) = (Vec::new(), Vec::new());
    for seed in 0..20u64 {
        for a in AMPS {
            let clip = gen_pair(&SynthSpec { jitter_amp: a, ..dataset_spec(seed) })?;
            levels.push(analyze(&clip.reference, &clip.distorted, &cfg)?.video_level);
            amps.push(a);
        }
    }
    let s = srcc(&levels, &amps)?.value;
    Ok((s >= 0.9, format!("spearman {s:.4} over {} clips", levels.len())))
}

/// The desk-scale model: both extractors emit 64 features.
fn desk_config(seed: u64, guidance: bool) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.channels = 1;
    cfg.guidance = guidance;
    cfg.fixed_segments = if guidance { None } else { Some(16) };
    cfg.coarse = CoarseConfig {
        input: 32,
        patch: 4,
        window: 4,
        mlp_ratio: 2,
        stages: vec![
            StageConfig { dim: 8, heads: 2, pairs: 1, merge: false },
            StageConfig { dim: 16, heads: 2, pairs: 1, merge: true },
            StageConfig { dim: 16, heads: 2, pairs: 1, merge: false },
        ],
        dwsa_stage: Some(2),
        dwsa_upsample_r: 2,
        dwsa_heads: 1,
        offset_clamp: 1.0,
        out_dim: 64,
    };
    cfg.fine = FineConfig { stem: 4, blocks: vec![8, 16], out_dim: 64 };
    cfg.temporal = TemporalConfig { d_gat: 16, d_hidden: 16, ..Default::default() };
    cfg.train.epochs = 50;
    cfg.train.lr = 3e-3;
    cfg.train.seed = seed;
    cfg
}

fn prepare(clips: &[LabeledClip], cfg: &PipelineConfig, jobs: usize) -> tiqa::Result<Vec<PreparedClip>> {
    let src: Vec<ClipSource> = clips
        .iter()
        .map(|c| ClipSource { id: &c.id, mos: c.mos, reference: &c.reference, distorted: &c.distorted })
        .collect();
    prepare_all(&src, cfg, jobs, None)
}

fn dataset(seed: u64) -> tiqa::Result<(Vec<LabeledClip>, Split)> {
    let (clips, _) = gen_dataset(&dataset_spec(seed), &AMPS)?;
    let split = split_dataset(&clips.iter().map(|c| c.content).collect::<Vec<_>>(), seed)?;
    Ok((clips, split))
}

/// Test SRCC of one seed's model, trained on the 70% split with the 10%
/// split selecting the checkpoint.
fn run_seed(seed: u64, guidance: bool, jobs: usize) -> tiqa::Result<f64> {
    let (clips, split) = dataset(seed)?;
    let cfg = desk_config(seed, guidance);
    let prep = prepare(&clips, &cfg, jobs)?;
    let out = train(&prep, &split, &cfg, |_| {})?;
    let test: Vec<PreparedClip> = split.test.iter().map(|&i| prep[i].clone()).collect();
    Ok(evaluate(&out.model, &test)?.0.srcc)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ")
}

fn checkpoint_files(dir: &Path) -> tiqa::Result<Vec<(String, Vec<u8>)>> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| tiqa::Error::io(dir, e))? {
        let p = e.map_err(|e| tiqa::Error::io(dir, e))?.path();
        let bytes = fs::read(&p).map_err(|e| tiqa::Error::io(&p, e))?;
        v.push((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), bytes));
    }
    v.sort();
    Ok(v)
}

fn determinism() -> Outcome {
    let (clips, split) = dataset(9)?;
    let mut cfg = desk_config(9, true);
    cfg.train.epochs = 2;
    let prep = prepare(&clips, &cfg, 1)?;
    let test: Vec<PreparedClip> = split.test.iter().map(|&i| prep[i].clone()).collect();
    let dir = tempfile::tempdir().map_err(|e| tiqa::Error::io(Path::new("tempdir"), e))?;
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = train(&prep, &split, &cfg, |_| {})?;
        let ck = dir.path().join(format!("run{k}"));
        out.model.save(&ck, out.best_epoch)?;
        let (rep, preds) = evaluate(&out.model, &test)?;
        let report = serde_json::to_string(&(rep, preds, out.history))?;
        runs.push((checkpoint_files(&ck)?, report));
    }
    let files = runs[0].0.len();
    let same_ck = runs[0].0 == runs[1].0;
    let same_rep = runs[0].1 == runs[1].1;
    Ok((same_ck && same_rep && files > 0, format!("{files} checkpoint files identical {same_ck}, reports identical {same_rep}")))
}

fn main() -> ExitCode {
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut r = Runner { failed: Vec::new() };
    r.run(1, "flow oracle", Some(Duration::from_secs(30)), flow_oracle);
    r.run(2, "identical inputs give zero inconsistency", None, null_case);
    r.run(3, "frequency decoupling", None, decoupling);
    r.run(4, "highlighting", None, highlighting);
    r.run(5, "memory threshold", None, threshold);
    r.run(6, "capacity segmentation", None, segmentation);
    r.run(7, "gradient suite", minutes(2), gradients);
    r.run(8, "metric oracles", None, metrics);
    r.run(9, "inconsistency rises with amplitude", minutes(5), level_monotonicity);

    let mut full = Vec::new();
    r.run(10, "end-to-end learning", minutes(15), || {
        for seed in SEEDS {
            full.push(run_seed(seed, true, jobs)?);
        }
        let hits = full.iter().filter(|&&s| s >= 0.8).count();
        Ok((hits >= 4, format!("test srcc [{}], {hits}/5 seeds >= 0.8, jobs {jobs}", fmt(&full))))
    });
    r.run(11, "guidance ablation", None, || {
        if full.len() < SEEDS.len() {
            return Ok((false, "full-model runs did not finish".into()));
        }
        let mut plain = Vec::new();
        for seed in SEEDS {
            plain.push(run_seed(seed, false, jobs)?);
        }
        let (m_full, m_plain) = (median(&full), median(&plain));
        Ok((
            m_full >= m_plain,
            format!("median srcc full {m_full:.4} vs no guidance {m_plain:.4} (no guidance [{}])", fmt(&plain)),
        ))
    });
    r.run(12, "determinism", None, determinism);

    if r.failed.is_empty() {
        println!("all 12 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {:?}", r.failed);
        ExitCode::FAILURE
    }
}
