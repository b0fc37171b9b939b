//! Correlation metrics between predictions and opinion scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A correlation value; `degenerate` marks a zero-variance input, for which
/// the value is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corr {
    pub value: f64,
    pub degenerate: bool,
}

fn check(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidParam("correlation needs at least two samples".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in metric input".into()));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> Corr {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Corr { value: 0.0, degenerate: true };
    }
    Corr { value: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0), degenerate: false }
}

pub fn plcc(x: &[f64], y: &[f64]) -> Result<Corr> {
    check(x, y)?;
    Ok(pearson(x, y))
}

pub fn srcc(x: &[f64], y: &[f64]) -> Result<Corr> {
    check(x, y)?;
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

/// Kendall's tau-b.
pub fn krcc(x: &[f64], y: &[f64]) -> Result<Corr> {
    check(x, y)?;
    let n = x.len();
    let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = (x[i] - x[j]).partial_cmp(&0.0).unwrap() as i64;
            let dy = (y[i] - y[j]).partial_cmp(&0.0).unwrap() as i64;
            match (dx, dy) {
                (0, 0) => {}
                (0, _) => tx += 1,
                (_, 0) => ty += 1,
                _ if dx == dy => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let n1 = (conc + disc + tx) as f64;
    let n2 = (conc + disc + ty) as f64;
    if n1 == 0.0 || n2 == 0.0 {
        return Ok(Corr { value: 0.0, degenerate: true });
    }
    Ok(Corr { value: ((conc - disc) as f64 / (n1 * n2).sqrt()).clamp(-1.0, 1.0), degenerate: false })
}

pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64> {
    check(x, y)?;
    Ok((x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub srcc: f64,
    pub plcc: f64,
    pub krcc: f64,
    pub rmse: f64,
    pub n: usize,
    /// Set when predictions or targets have zero variance.
    pub degenerate: bool,
}

impl EvalReport {
    pub fn from_pairs(pred: &[f64], target: &[f64]) -> Result<Self> {
        let s = srcc(pred, target)?;
        let p = plcc(pred, target)?;
        let k = krcc(pred, target)?;
        Ok(EvalReport {
            srcc: s.value,
            plcc: p.value,
            krcc: k.value,
            rmse: rmse(pred, target)?,
            n: pred.len(),
            degenerate: s.degenerate || p.degenerate || k.degenerate,
        })
    }
}
