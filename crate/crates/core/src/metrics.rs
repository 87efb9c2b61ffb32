//! Sentiment metrics (Acc-2, F1, MAE, Pearson correlation) and diagnostics
//! of representation geometry.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Acc2Options {
    /// Drop samples whose target is exactly zero.
    pub exclude_zero: bool,
    /// Support-weighted average of per-class F1 instead of binary F1 on the
    /// non-negative class.
    pub weighted_f1: bool,
}

fn check_pair(pred: &[f64], target: &[f64], op: &'static str) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch {
            op,
            left: pred.len(),
            right: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput { op });
    }
    Ok(())
}

fn f1_of(tp: usize, fp: usize, fn_: usize) -> f64 {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Binary accuracy and F1 after splitting at zero: negative (`< 0`) versus
/// non-negative (`>= 0`), the latter being the positive class.
pub fn acc2_f1(pred: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    acc2_f1_with(pred, target, Acc2Options::default())
}

pub fn acc2_f1_with(pred: &[f64], target: &[f64], opts: Acc2Options) -> Result<(f64, f64)> {
    check_pair(pred, target, "acc2_f1")?;
    let pairs: Vec<(bool, bool)> = pred
        .iter()
        .zip(target)
        .filter(|(_, t)| !(opts.exclude_zero && **t == 0.0))
        .map(|(p, t)| (*p >= 0.0, *t >= 0.0))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyInput { op: "acc2_f1" });
    }
    let count = |p: bool, t: bool| pairs.iter().filter(|&&x| x == (p, t)).count();
    let (tp, fp, fn_, tn) = (
        count(true, true),
        count(true, false),
        count(false, true),
        count(false, false),
    );
    let n = pairs.len() as f64;
    let acc = (tp + tn) as f64 / n;
    let f1 = if opts.weighted_f1 {
        let pos = f1_of(tp, fp, fn_);
        let neg = f1_of(tn, fn_, fp);
        (pos * (tp + fn_) as f64 + neg * (tn + fp) as f64) / n
    } else {
        f1_of(tp, fp, fn_)
    };
    Ok((acc, f1))
}

/// `(1/N) Σ |pred_i − target_i|`.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target, "mae")?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Sample Pearson correlation; `None` when either input is constant.
pub fn pearson(pred: &[f64], target: &[f64]) -> Result<Option<f64>> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch {
            op: "pearson",
            left: pred.len(),
            right: target.len(),
        });
    }
    if pred.len() < 2 {
        return Err(Error::Degenerate {
            op: "pearson",
            detail: format!("need at least 2 samples, got {}", pred.len()),
        });
    }
    let n = pred.len() as f64;
    let (mp, mt) = (pred.iter().sum::<f64>() / n, target.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// One evaluation result; `corr` is `None` (serialized as `null`) when
/// undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc2: f64,
    pub f1: f64,
    pub mae: f64,
    pub corr: Option<f64>,
}

impl MetricReport {
    pub fn compute(pred: &[f64], target: &[f64]) -> Result<Self> {
        let (acc2, f1) = acc2_f1(pred, target)?;
        let corr = if pred.len() >= 2 { pearson(pred, target)? } else { None };
        Ok(Self {
            acc2,
            f1,
            mae: mae(pred, target)?,
            corr,
        })
    }
}

/// Class-separation statistics of a set of representations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Mean cosine over distinct same-class pairs.
    pub within: f64,
    /// Mean cosine over different-class pairs.
    pub between: f64,
    /// Held-out accuracy of a least-squares linear probe.
    pub probe: f64,
}

impl Diagnostics {
    pub fn gap(&self) -> f64 {
        self.within - self.between
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate {
            op: "cosine",
            detail: "zero vector".into(),
        });
    }
    Ok(d / (na * nb))
}

/// Mean within-class and between-class cosine similarity over all pairs.
pub fn class_cosines(vectors: &[Vec<f64>], labels: &[usize]) -> Result<(f64, f64)> {
    if vectors.len() != labels.len() {
        return Err(Error::LengthMismatch {
            op: "class_cosines",
            left: vectors.len(),
            right: labels.len(),
        });
    }
    let (mut ws, mut wn, mut bs, mut bn) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let c = cosine(&vectors[i], &vectors[j])?;
            if labels[i] == labels[j] {
                ws += c;
                wn += 1;
            } else {
                bs += c;
                bn += 1;
            }
        }
    }
    if bn == 0 {
        return Err(Error::SingleClass);
    }
    Ok((if wn == 0 { 0.0 } else { ws / wn as f64 }, bs / bn as f64))
}

/// Trains a least-squares linear classifier (one-hot targets, bias column)
/// on `train` and returns its accuracy on `test`.
pub fn linear_probe(train: &[Vec<f64>], train_y: &[usize], test: &[Vec<f64>], test_y: &[usize]) -> Result<f64> {
    if train.len() != train_y.len() || test.len() != test_y.len() {
        return Err(Error::LengthMismatch {
            op: "linear_probe",
            left: train.len() + test.len(),
            right: train_y.len() + test_y.len(),
        });
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyInput { op: "linear_probe" });
    }
    let classes = train_y.iter().chain(test_y).max().unwrap() + 1;
    let d = train[0].len();
    let design = |rows: &[Vec<f64>]| {
        DMatrix::from_fn(rows.len(), d + 1, |i, j| if j == d { 1.0 } else { rows[i][j] })
    };
    let x = design(train);
    let y = DMatrix::from_fn(train.len(), classes, |i, c| if train_y[i] == c { 1.0 } else { 0.0 });
    let w = x
        .svd(true, true)
        .solve(&y, 1e-10)
        .map_err(|e| Error::Degenerate {
            op: "linear_probe",
            detail: e.into(),
        })?;
    let scores = design(test) * w;
    let correct = (0..test.len())
        .filter(|&i| scores.row(i).transpose().argmax().0 == test_y[i])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Cosine statistics over all pairs plus a linear probe trained on every
/// other sample and evaluated on the rest.
///
/// Samples are put in a canonical order (by label, then by value) before the
/// split, so the result does not depend on input order.
pub fn representation_diagnostics(vectors: &[Vec<f64>], labels: &[usize]) -> Result<Diagnostics> {
    let (within, between) = class_cosines(vectors, labels)?;
    let mut order: Vec<usize> = (0..vectors.len()).collect();
    order.sort_by(|&a, &b| {
        labels[a]
            .cmp(&labels[b])
            .then_with(|| vectors[a].iter().map(|v| v.to_bits()).cmp(vectors[b].iter().map(|v| v.to_bits())))
    });
    let (mut tr, mut tr_y, mut te, mut te_y) = (vec![], vec![], vec![], vec![]);
    for (k, &i) in order.iter().enumerate() {
        if k % 2 == 0 {
            tr.push(vectors[i].clone());
            tr_y.push(labels[i]);
        } else {
            te.push(vectors[i].clone());
            te_y.push(labels[i]);
        }
    }
    let probe = linear_probe(&tr, &tr_y, &te, &te_y)?;
    Ok(Diagnostics { within, between, probe })
}
