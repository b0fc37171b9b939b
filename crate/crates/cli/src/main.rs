use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tiqa::igtm::{align_levels, fixed_segments, segment_ranges};
use tiqa::inconsistency::{analyze, highlight, memory_threshold, LevelStats};
use tiqa::media::{detect_format, load_video, save_map, save_video, MapFormat, VideoFormat, VideoTensor};
use tiqa::model::{prepare_all, prepare_clip, ClipSource, PipelineConfig, QualityModel};
use tiqa::synth::{gen_dataset, read_dataset, write_dataset, SynthSpec};
use tiqa::train::{evaluate, split_dataset, train, Split};
use tiqa::Error;

#[derive(Parser)]
#[command(name = "tiqa", version, about = "Temporal-inconsistency guided video quality assessment")]
struct Cli {
    /// Threads for per-clip preprocessing.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic reference/distorted dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write inconsistency maps and levels for one pair.
    Inconsistency {
        #[command(flatten)]
        pair: Pair,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = MapKind::Pgm)]
        map_format: MapKind,
    },
    /// Write the distorted clip weighted by its coarse or fine map.
    Highlight {
        #[command(flatten)]
        pair: Pair,
        #[arg(long, value_enum)]
        grain: Grain,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ClipKind::RawPlanar)]
        format: ClipKind,
    },
    /// Print the temporal segmentation of one pair.
    Segment {
        #[command(flatten)]
        pair: Pair,
        /// Level range of the training set, `{"min": .., "max": ..}`.
        #[arg(long, required_unless_present = "fixed_segments")]
        stats: Option<PathBuf>,
        /// Use segments of N frames instead of capacity segmentation.
        #[arg(long)]
        fixed_segments: Option<usize>,
    },
    /// Train a model on a synthetic dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Preprocessing cache; defaults to `<out>/cache`.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score one pair with a trained model.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        pair: Pair,
        #[arg(long)]
        id: Option<String>,
    },
    /// Report correlation metrics on a dataset split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitKind::Test)]
        split: SplitKind,
        /// Also write per-clip prediction records here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct Pair {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    dist: PathBuf,
    /// Pipeline config JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MapKind {
    Pgm,
    Png,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grain {
    Coarse,
    Fine,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClipKind {
    RawPlanar,
    PngSeq,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SplitKind {
    Train,
    Val,
    Test,
    All,
}

/// Synth spec file: spec fields plus an optional amplitude grid.
#[derive(Deserialize)]
struct SynthFile {
    #[serde(flatten)]
    spec: SynthSpec,
    #[serde(default = "default_amps")]
    amp_grid: Vec<f64>,
}

fn default_amps() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0, 4.0]
}

#[derive(Serialize)]
struct LevelsReport {
    frame_levels: Vec<f64>,
    video_level: f64,
}

#[derive(Serialize)]
struct SegmentReport {
    segments: Vec<[usize; 2]>,
    threshold: Option<f64>,
    frame_levels: Vec<f64>,
    video_level: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    epochs: usize,
    train: usize,
    val: usize,
    test: usize,
    checkpoint: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingPath(_) | Error::Io { .. } | Error::Image(_) | Error::Format(_) => 3,
        Error::Numeric(_) => 4,
        Error::Json(_) | Error::Unsupported(_) | Error::Shape(_) | Error::InvalidParam(_) => 2,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> tiqa::Result<T> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> tiqa::Result<()> {
    fs::write(path, serde_json::to_vec_pretty(v)?).map_err(|e| Error::io(path, e))
}

fn print_json<T: Serialize>(v: &T) -> tiqa::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_config(path: Option<&Path>) -> tiqa::Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_any(path: &Path) -> tiqa::Result<VideoTensor> {
    load_video(path, detect_format(path)?)
}

fn load_pair(p: &Pair) -> tiqa::Result<(VideoTensor, VideoTensor, PipelineConfig)> {
    let cfg = load_config(p.config.as_deref())?;
    Ok((load_any(&p.reference)?, load_any(&p.dist)?, cfg))
}

fn create_dir(dir: &Path) -> tiqa::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cli: Cli) -> tiqa::Result<()> {
    let jobs = cli.jobs.max(1);
    match cli.cmd {
        Cmd::Synth { spec, out } => {
            let file: SynthFile = read_json(&spec)?;
            let (clips, manifest) = gen_dataset(&file.spec, &file.amp_grid)?;
            write_dataset(&out, &clips, &manifest)?;
            print_json(&manifest)
        }
        Cmd::Inconsistency { pair, out, map_format } => {
            let (r, d, cfg) = load_pair(&pair)?;
            let b = analyze(&r, &d, &cfg.inconsistency)?;
            create_dir(&out)?;
            let (fmt, ext) = match map_format {
                MapKind::Pgm => (MapFormat::Pgm16, "pgm"),
                MapKind::Png => (MapFormat::Png, "png"),
            };
            for (name, maps) in [("vi", &b.vi), ("vi_coarse", &b.vi_coarse), ("vi_fine", &b.vi_fine)] {
                for (t, m) in maps.iter().enumerate() {
                    save_map(m, b.h, b.w, &out.join(format!("{name}_{t:04}.{ext}")), fmt)?;
                }
            }
            let report = LevelsReport { frame_levels: b.frame_levels, video_level: b.video_level };
            write_json(&out.join("levels.json"), &report)?;
            print_json(&report)
        }
        Cmd::Highlight { pair, grain, out, format } => {
            let (r, d, cfg) = load_pair(&pair)?;
            let b = analyze(&r, &d, &cfg.inconsistency)?;
            let maps = match grain {
                Grain::Coarse => &b.vi_coarse,
                Grain::Fine => &b.vi_fine,
            };
            let hl = highlight(&d, maps)?;
            let fmt = match format {
                ClipKind::RawPlanar => VideoFormat::RawPlanar,
                ClipKind::PngSeq => VideoFormat::PngSeq,
            };
            save_video(&hl, &out, fmt)?;
            print_json(&serde_json::json!({ "frames": hl.len(), "out": out }))
        }
        Cmd::Segment { pair, stats, fixed_segments: fixed } => {
            let (r, d, cfg) = load_pair(&pair)?;
            let b = analyze(&r, &d, &cfg.inconsistency)?;
            let (segs, threshold) = match fixed {
                Some(n) => (fixed_segments(r.len(), n)?, None),
                None => {
                    let s: LevelStats = read_json(stats.as_deref().expect("clap requires stats"))?;
                    if !(s.max >= s.min) {
                        return Err(Error::InvalidParam("stats need max >= min".into()));
                    }
                    let t = memory_threshold(b.video_level, s.min, s.max, cfg.tau, cfg.eta);
                    (segment_ranges(&align_levels(&b.frame_levels, r.len())?, t)?, Some(t))
                }
            };
            print_json(&SegmentReport {
                segments: segs.iter().map(|s| [s.start, s.end]).collect(),
                threshold,
                frame_levels: b.frame_levels,
                video_level: b.video_level,
            })
        }
        Cmd::Train { data, config, out, cache, seed, epochs } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let (clips, _) = read_dataset(&data)?;
            let sources: Vec<ClipSource> = clips
                .iter()
                .map(|c| ClipSource { id: &c.id, mos: c.mos, reference: &c.reference, distorted: &c.distorted })
                .collect();
            create_dir(&out)?;
            let cache = cache.unwrap_or_else(|| out.join("cache"));
            let prepared = prepare_all(&sources, &cfg, jobs, Some(&cache))?;
            let split = split_dataset(&clips.iter().map(|c| c.content).collect::<Vec<_>>(), cfg.train.seed)?;
            let outcome = train(&prepared, &split, &cfg, |r| {
                eprintln!(
                    "epoch {:3} lr {:.2e} train {:.4} val {} srcc {}",
                    r.epoch,
                    r.lr,
                    r.train_loss,
                    r.val_loss.map_or("-".into(), |v| format!("{v:.4}")),
                    r.val_srcc.map_or("-".into(), |v| format!("{v:.4}")),
                )
            })?;
            outcome.model.save(&out, outcome.best_epoch)?;
            write_json(&out.join("history.json"), &outcome.history)?;
            write_json(&out.join("split.json"), &split)?;
            print_json(&TrainSummary {
                best_epoch: outcome.best_epoch,
                epochs: outcome.history.len(),
                train: split.train.len(),
                val: split.val.len(),
                test: split.test.len(),
                checkpoint: out,
            })
        }
        Cmd::Predict { ckpt, pair, id } => {
            let (model, _) = QualityModel::load(&ckpt)?;
            let r = load_any(&pair.reference)?;
            let d = load_any(&pair.dist)?;
            let name = id.unwrap_or_else(|| pair.dist.file_stem().map_or("video".into(), |s| s.to_string_lossy().into()));
            let clip = prepare_clip(&name, f64::NAN, &r, &d, &model.cfg)?;
            let rec = model.predict(&[&clip])?.remove(0);
            print_json(&rec)
        }
        Cmd::Evaluate { ckpt, data, split, predictions } => {
            let (model, _) = QualityModel::load(&ckpt)?;
            let (clips, _) = read_dataset(&data)?;
            let ids: Vec<usize> = if split == SplitKind::All {
                (0..clips.len()).collect()
            } else {
                let s: Split = read_json(&ckpt.join("split.json"))?;
                match split {
                    SplitKind::Train => s.train,
                    SplitKind::Val => s.val,
                    _ => s.test,
                }
            };
            if let Some(&bad) = ids.iter().find(|&&i| i >= clips.len()) {
                return Err(Error::InvalidParam(format!("split index {bad} beyond {} clips", clips.len())));
            }
            let sources: Vec<ClipSource> = ids
                .iter()
                .map(|&i| &clips[i])
                .map(|c| ClipSource { id: &c.id, mos: c.mos, reference: &c.reference, distorted: &c.distorted })
                .collect();
            let prepared = prepare_all(&sources, &model.cfg, jobs, None)?;
            let (report, preds) = evaluate(&model, &prepared)?;
            if let Some(p) = predictions {
                write_json(&p, &preds)?;
            }
            print_json(&report)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
