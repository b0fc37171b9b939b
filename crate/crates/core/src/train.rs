//! Loss, dataset split and the training/evaluation loops.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inconsistency::LevelStats;
use crate::metrics::{average_ranks, srcc, EvalReport};
use crate::model::{PipelineConfig, PredictionRecord, PreparedClip, QualityModel};
use crate::nn::{lr_at_epoch, AdamConfig, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MseSrcc,
    L1Srcc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Soft-rank temperature of the correlation term.
    pub temperature: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch: 16,
            lr: 1e-3,
            lr_decay: 0.8,
            decay_every: 10,
            temperature: 0.05,
            loss: LossKind::MseSrcc,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.decay_every == 0 {
            return Err(Error::InvalidParam("batch and decay_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.temperature > 0.0 && self.lr_decay > 0.0) {
            return Err(Error::InvalidParam("lr, lr_decay and temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Pearson correlation between soft ranks `r̂_i = Σ_j σ((p_i − p_j)/T)` of
/// `pred: [n]` and the exact ranks of `target`. Degenerate cases give a
/// constant 0.
pub fn soft_srcc(g: &mut Graph, pred: Var, target: &[f64], temperature: f64) -> Result<Var> {
    let n = target.len();
    if g.shape(pred) != [n] {
        return Err(Error::Shape(format!("{:?} predictions for {n} targets", g.shape(pred))));
    }
    let tr = average_ranks(target);
    let mt = tr.iter().sum::<f64>() / n as f64;
    let tn = tr.iter().map(|r| (r - mt).powi(2)).sum::<f64>().sqrt();
    if tn == 0.0 {
        return Ok(g.input(Tensor::from_vec(&[1], vec![0.0])));
    }
    let rows: Arc<[usize]> = (0..n * n).map(|p| p / n).collect();
    let cols: Arc<[usize]> = (0..n * n).map(|p| p % n).collect();
    let pi = g.gather(pred, rows, &[n, n])?;
    let pj = g.gather(pred, cols, &[n, n])?;
    let d = g.sub(pi, pj)?;
    let d = g.scale(d, 1.0 / temperature);
    let s = g.sigmoid(d);
    let r = g.mean_axis(s, 1)?;
    let r = g.scale(r, n as f64);
    let center: Vec<f64> = (0..n * n)
        .map(|p| if p / n == p % n { 1.0 } else { 0.0 } - 1.0 / n as f64)
        .collect();
    let c = g.input(Tensor::from_vec(&[n, n], center));
    let r = g.reshape(r, &[n, 1])?;
    let rc = g.matmul(c, r)?;
    let sq = g.square(rc);
    let ss = g.sum_all(sq);
    if g.value(ss).item() <= 1e-24 {
        return Ok(g.input(Tensor::from_vec(&[1], vec![0.0])));
    }
    let norm = g.sqrt(ss);
    let z = g.input(Tensor::from_vec(&[1, n], tr.iter().map(|r| (r - mt) / tn).collect()));
    let dot = g.matmul(z, rc)?;
    let dot = g.reshape(dot, &[1])?;
    let norm = g.reshape(norm, &[1])?;
    g.div(dot, norm)
}

/// `MSE + (1 − soft SRCC)`, or MSE alone for fewer than two samples.
pub fn loss_mse_srcc(g: &mut Graph, pred: Var, target: &[f64], temperature: f64) -> Result<Var> {
    regression_loss(g, pred, target, temperature, LossKind::MseSrcc)
}

pub fn regression_loss(g: &mut Graph, pred: Var, target: &[f64], temperature: f64, kind: LossKind) -> Result<Var> {
    let n = target.len();
    if n == 0 || g.shape(pred) != [n] {
        return Err(Error::Shape(format!("{:?} predictions for {n} targets", g.shape(pred))));
    }
    let t = g.input(Tensor::from_vec(&[n], target.to_vec()));
    let d = g.sub(pred, t)?;
    let d = g.square(d);
    let d = match kind {
        LossKind::MseSrcc => d,
        LossKind::L1Srcc => g.sqrt(d),
    };
    let fit = g.mean_all(d);
    if n < 2 {
        return Ok(fit);
    }
    let corr = soft_srcc(g, pred, target, temperature)?;
    let pen = g.scale(corr, -1.0);
    let pen = g.add_scalar(pen, 1.0);
    let pen = g.reshape(pen, &[1])?;
    let fit = g.reshape(fit, &[1])?;
    g.add(fit, pen)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded 70/10/20 split over content groups: clips with the same content
/// id land in the same part. Groups are shuffled and each goes to the part
/// in which its midpoint falls.
pub fn split_dataset(contents: &[usize], seed: u64) -> Result<Split> {
    let n = contents.len();
    if n < 10 {
        return Err(Error::InvalidParam(format!("need at least 10 clips to split, got {n}")));
    }
    let mut groups: Vec<usize> = contents.to_vec();
    groups.sort_unstable();
    groups.dedup();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (0.7 * n as f64).round();
    let n_val = (0.1 * n as f64).round();
    let mut split = Split { train: vec![], val: vec![], test: vec![] };
    let mut cum = 0usize;
    for gid in groups {
        let members: Vec<usize> = (0..n).filter(|&i| contents[i] == gid).collect();
        let mid = cum as f64 + members.len() as f64 / 2.0;
        cum += members.len();
        let part = if mid < n_train {
            &mut split.train
        } else if mid < n_train + n_val {
            &mut split.val
        } else {
            &mut split.test
        };
        part.extend(members);
    }
    for p in [&mut split.train, &mut split.val, &mut split.test] {
        p.sort_unstable();
    }
    if split.train.is_empty() {
        return Err(Error::InvalidParam("content groups too large for a training split".into()));
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_srcc: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss (training
    /// loss without a validation split).
    pub model: QualityModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn batch_loss(model: &QualityModel, g: &mut Graph, clips: &[&PreparedClip]) -> Result<Var> {
    let outs = model.forward(g, clips)?;
    let pred = model.scores(g, &outs)?;
    let target: Vec<f64> = clips.iter().map(|c| c.mos).collect();
    let t = &model.cfg.train;
    regression_loss(g, pred, &target, t.temperature, t.loss)
}

/// Mean batch loss and predictions without updating parameters.
fn assess(model: &QualityModel, clips: &[&PreparedClip]) -> Result<(f64, Vec<f64>)> {
    let (mut total, mut preds) = (0.0, Vec::with_capacity(clips.len()));
    for chunk in clips.chunks(model.cfg.train.batch) {
        let mut g = Graph::new();
        let outs = model.forward(&mut g, chunk)?;
        let pred = model.scores(&mut g, &outs)?;
        preds.extend_from_slice(&g.value(pred).data);
        let target: Vec<f64> = chunk.iter().map(|c| c.mos).collect();
        let t = &model.cfg.train;
        let l = regression_loss(&mut g, pred, &target, t.temperature, t.loss)?;
        total += g.value(l).item() * chunk.len() as f64;
    }
    Ok((total / clips.len() as f64, preds))
}

/// Trains on `split.train`, selecting the best epoch on `split.val`.
/// `on_epoch` sees every history record as it is produced.
pub fn train(
    clips: &[PreparedClip],
    split: &Split,
    cfg: &PipelineConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if split.train.is_empty() {
        return Err(Error::InvalidParam("empty training split".into()));
    }
    let pick = |ids: &[usize]| -> Result<Vec<&PreparedClip>> {
        ids.iter()
            .map(|&i| clips.get(i).ok_or_else(|| Error::InvalidParam(format!("split index {i} out of range"))))
            .collect()
    };
    let train_set = pick(&split.train)?;
    let val_set = pick(&split.val)?;
    let stats = LevelStats::from_levels(&train_set.iter().map(|c| c.video_level).collect::<Vec<_>>())?;
    let mut model = QualityModel::new(cfg, stats)?;
    let t = cfg.train.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(t.epochs);
    let mut best: Option<(f64, usize, crate::nn::ParamStore)> = None;
    for epoch in 0..t.epochs {
        let lr = lr_at_epoch(t.lr, epoch, t.lr_decay, t.decay_every);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(t.batch) {
            let batch: Vec<&PreparedClip> = idx.iter().map(|&i| train_set[i]).collect();
            let mut g = Graph::new();
            let loss = batch_loss(&model, &mut g, &batch)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("loss became {lv} at epoch {epoch}")));
            }
            let grads = g.backward(loss)?;
            model.store.zero_grad();
            model.store.accumulate(&g, &grads);
            if !model.store.grads_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at epoch {epoch}")));
            }
            model.store.adam_step(lr, &t.adam);
            total += lv * batch.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let (val_loss, val_srcc) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, p) = assess(&model, &val_set)?;
            let mos: Vec<f64> = val_set.iter().map(|c| c.mos).collect();
            let s = if p.len() >= 2 { Some(srcc(&p, &mos)?.value) } else { None };
            (Some(l), s)
        };
        let rec = EpochRecord { epoch, lr, train_loss, val_loss, val_srcc };
        on_epoch(&rec);
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().map_or(true, |b| score < b.0) {
            best = Some((score, epoch, model.store.clone()));
        }
        history.push(rec);
    }
    let best_epoch = match best {
        Some((_, e, store)) => {
            model.store = store;
            e
        }
        None => 0,
    };
    Ok(TrainOutcome { model, best_epoch, history })
}

/// Runs inference on `clips` and compares against their MOS.
pub fn evaluate(model: &QualityModel, clips: &[PreparedClip]) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    if clips.is_empty() {
        return Err(Error::InvalidParam("nothing to evaluate".into()));
    }
    let preds = model.predict_all(clips)?;
    let p: Vec<f64> = preds.iter().map(|r| r.s).collect();
    let mos: Vec<f64> = clips.iter().map(|c| c.mos).collect();
    Ok((EvalReport::from_pairs(&p, &mos)?, preds))
}
