//! Forecast quality: root relative squared error and coefficient of
//! determination over `[M, L, C]` predictions.
//!
//! `Ybar` is the per-position mean over the `M` samples.
//!
//! ```text
//! RSE = sqrt( sum_m ||Y^m - Yhat^m||^2 / sum_m ||Y^m - Ybar||^2 )
//! R2  = 1/(C L) sum_{c,l} [ 1 - sum_m (Y - Yhat)^2 / sum_m (Y - Ybar_{c,l})^2 ]
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("predictions {pred:?} and targets {truth:?} differ in shape")]
    ShapeMismatch { pred: Vec<usize>, truth: Vec<usize> },
    #[error("metrics need a non-empty [M, L, C] array, got {0:?}")]
    BadShape(Vec<usize>),
    #[error("targets are constant across samples, so the relative error is undefined")]
    ConstantTruth,
}

fn dims(preds: &Tensor, truths: &Tensor) -> Result<(usize, usize), MetricError> {
    if preds.shape() != truths.shape() {
        return Err(MetricError::ShapeMismatch {
            pred: preds.shape().to_vec(),
            truth: truths.shape().to_vec(),
        });
    }
    match *truths.shape() {
        [m, l, c] if m > 0 => Ok((m, l * c)),
        _ => Err(MetricError::BadShape(truths.shape().to_vec())),
    }
}

/// Per-position mean over samples, `[L * C]`.
fn position_means(truths: &Tensor, m: usize, k: usize) -> Vec<f64> {
    let mut mean = vec![0.0f64; k];
    for row in truths.data().chunks(k) {
        for (a, &v) in mean.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    mean
}

/// Per-position sums of squared error and squared deviation from the mean.
fn position_sums(preds: &Tensor, truths: &Tensor, m: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let mean = position_means(truths, m, k);
    let mut err = vec![0.0f64; k];
    let mut dev = vec![0.0f64; k];
    for (prow, trow) in preds.data().chunks(k).zip(truths.data().chunks(k)) {
        for j in 0..k {
            let (p, t) = (prow[j] as f64, trow[j] as f64);
            err[j] += (t - p) * (t - p);
            dev[j] += (t - mean[j]) * (t - mean[j]);
        }
    }
    (err, dev)
}

pub fn rse(preds: &Tensor, truths: &Tensor) -> Result<f64, MetricError> {
    let (m, k) = dims(preds, truths)?;
    let (err, dev) = position_sums(preds, truths, m, k);
    let den: f64 = dev.iter().sum();
    if den == 0.0 {
        return Err(MetricError::ConstantTruth);
    }
    Ok((err.iter().sum::<f64>() / den).sqrt())
}

/// R² value and the number of `(l, c)` positions skipped because their
/// targets do not vary across samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct R2 {
    pub value: f64,
    pub skipped: usize,
}

pub fn r2_detail(preds: &Tensor, truths: &Tensor) -> Result<R2, MetricError> {
    let (m, k) = dims(preds, truths)?;
    let (err, dev) = position_sums(preds, truths, m, k);
    let mut sum = 0.0;
    let mut used = 0usize;
    for (e, d) in err.iter().zip(&dev) {
        if *d > 0.0 {
            sum += 1.0 - e / d;
            used += 1;
        }
    }
    if used == 0 {
        return Err(MetricError::ConstantTruth);
    }
    if used < k {
        log::warn!("R2 skipped {} of {k} positions with constant targets", k - used);
    }
    Ok(R2 {
        value: sum / used as f64,
        skipped: k - used,
    })
}

pub fn r2(preds: &Tensor, truths: &Tensor) -> Result<f64, MetricError> {
    r2_detail(preds, truths).map(|r| r.value)
}

/// Mean of `1 - (Y - Yhat)^2 / (Y - Ybar_{c,l})^2` taken element by element,
/// skipping elements that sit exactly on their position mean.
///
/// Single elements close to their mean dominate this average, so it is
/// provided for comparison only.
pub fn r2_pointwise(preds: &Tensor, truths: &Tensor) -> Result<R2, MetricError> {
    let (m, k) = dims(preds, truths)?;
    let mean = position_means(truths, m, k);
    let mut sum = 0.0;
    let mut used = 0usize;
    for (prow, trow) in preds.data().chunks(k).zip(truths.data().chunks(k)) {
        for j in 0..k {
            let d = trow[j] as f64 - mean[j];
            if d != 0.0 {
                let e = trow[j] as f64 - prow[j] as f64;
                sum += 1.0 - (e * e) / (d * d);
                used += 1;
            }
        }
    }
    if used == 0 {
        return Err(MetricError::ConstantTruth);
    }
    Ok(R2 {
        value: sum / used as f64,
        skipped: m * k - used,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub backbone: String,
    pub split: String,
    pub m: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub rse: f64,
    pub r2: f64,
    /// `(rse, r2)` per horizon step, when requested.
    pub per_horizon: Vec<(f64, f64)>,
}

impl MetricReport {
    pub fn compute(
        preds: &Tensor,
        truths: &Tensor,
        backbone: &str,
        split: &str,
        lookback: usize,
        per_horizon: bool,
    ) -> Result<Self, MetricError> {
        let (m, _) = dims(preds, truths)?;
        let (l, c) = (truths.shape()[1], truths.shape()[2]);
        let mut steps = Vec::new();
        if per_horizon {
            for h in 0..l {
                let pick = |t: &Tensor| {
                    let v: Vec<f32> = (0..m).flat_map(|i| t.data()[(i * l + h) * c..(i * l + h + 1) * c].to_vec()).collect();
                    Tensor::new(vec![m, 1, c], v).expect("slice shape")
                };
                let (p, t) = (pick(preds), pick(truths));
                steps.push((rse(&p, &t).unwrap_or(f64::NAN), r2(&p, &t).unwrap_or(f64::NAN)));
            }
        }
        Ok(Self {
            backbone: backbone.to_string(),
            split: split.to_string(),
            m,
            lookback,
            horizon: l,
            rse: rse(preds, truths)?,
            r2: r2(preds, truths)?,
            per_horizon: steps,
        })
    }

    /// One header row and one value row, then per-step rows if present.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "backbone,split,m,lookback,horizon,step,rse,r2")?;
        writeln!(
            f,
            "{},{},{},{},{},all,{},{}",
            self.backbone, self.split, self.m, self.lookback, self.horizon, self.rse, self.r2
        )?;
        for (i, (a, b)) in self.per_horizon.iter().enumerate() {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                self.backbone,
                self.split,
                self.m,
                self.lookback,
                self.horizon,
                i + 1,
                a,
                b
            )?;
        }
        f.flush()
    }
}
