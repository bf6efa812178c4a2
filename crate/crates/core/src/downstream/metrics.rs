//! Classification and regression scores.

use std::fmt::Write as _;

use crate::error::{Error, Result};

fn check_pair<T>(y_true: &[T], y_pred: &[T], min_len: usize) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Usage(format!(
            "{} targets but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.len() < min_len {
        return Err(Error::Usage(format!(
            "need at least {min_len} samples, got {}",
            y_true.len()
        )));
    }
    Ok(())
}

/// `confusion[t][p]` counts samples of true class `t` predicted as `p`.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    check_pair(y_true, y_pred, 1)?;
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for (what, c) in [("true label", t), ("predicted label", p)] {
            if c >= n_classes {
                return Err(Error::Index {
                    what,
                    index: c,
                    len: n_classes,
                });
            }
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True-label count `n_i`.
    pub support: u64,
    /// False when the class occurs in neither the targets nor the predictions.
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassScores>,
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassificationReport {
    /// Labels must lie in `0..n_classes`; `n_classes` may exceed the labels seen.
    pub fn compute(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Self> {
        let confusion = confusion_matrix(y_true, y_pred, n_classes)?;
        let total = y_true.len() as u64;
        let mut per_class = Vec::with_capacity(n_classes);
        let mut correct = 0;
        for i in 0..n_classes {
            let tp = confusion[i][i];
            let support: u64 = confusion[i].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[i]).sum();
            correct += tp;
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            per_class.push(ClassScores {
                precision,
                recall,
                f1,
                support,
                present: support + predicted > 0,
            });
        }
        let present: Vec<&ClassScores> = per_class.iter().filter(|c| c.present).collect();
        let macro_f1 = present.iter().map(|c| c.f1).sum::<f64>() / present.len() as f64;
        let weighted_f1 = per_class.iter().map(|c| c.support as f64 * c.f1).sum::<f64>() / total as f64;
        Ok(ClassificationReport {
            accuracy: ratio(correct, total),
            macro_f1,
            weighted_f1,
            per_class,
            confusion,
        })
    }
}

fn n_classes_of(y_true: &[usize], y_pred: &[usize]) -> usize {
    y_true.iter().chain(y_pred).max().map_or(0, |m| m + 1)
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    Ok(ClassificationReport::compute(y_true, y_pred, n_classes_of(y_true, y_pred))?.accuracy)
}

pub fn macro_f1(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    Ok(ClassificationReport::compute(y_true, y_pred, n_classes_of(y_true, y_pred))?.macro_f1)
}

/// Per-class F1 weighted by true support and normalized by the sample count.
pub fn weighted_f1(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    Ok(ClassificationReport::compute(y_true, y_pred, n_classes_of(y_true, y_pred))?.weighted_f1)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance (`1/(n-1)`).
fn sample_var(x: &[f64], m: f64) -> f64 {
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Sample covariance over the product of sample standard deviations.
pub fn pearson(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair(y_true, y_pred, 2)?;
    let (mt, mp) = (mean(y_true), mean(y_pred));
    let (vt, vp) = (sample_var(y_true, mt), sample_var(y_pred, mp));
    if vt == 0.0 || vp == 0.0 {
        return Err(Error::DegenerateInput("pearson: zero variance".into()));
    }
    let cov = y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| (t - mt) * (p - mp))
        .sum::<f64>()
        / (y_true.len() - 1) as f64;
    Ok((cov / (vt * vp).sqrt()).clamp(-1.0, 1.0))
}

/// `1 - SS_res / SS_tot`.
pub fn r2(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair(y_true, y_pred, 2)?;
    let m = mean(y_true);
    let ss_tot: f64 = y_true.iter().map(|t| (t - m).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::DegenerateInput("r2: constant targets".into()));
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(t, p)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair(y_true, y_pred, 1)?;
    let mse = y_true.iter().zip(y_pred).map(|(t, p)| (t - p).powi(2)).sum::<f64>() / y_true.len() as f64;
    Ok(mse.sqrt())
}

pub fn mae(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair(y_true, y_pred, 1)?;
    Ok(y_true.iter().zip(y_pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / y_true.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionReport {
    pub pearson: f64,
    pub r2: f64,
    pub rmse: f64,
    pub mae: f64,
}

impl RegressionReport {
    pub fn compute(y_true: &[f64], y_pred: &[f64]) -> Result<Self> {
        Ok(RegressionReport {
            pearson: pearson(y_true, y_pred)?,
            r2: r2(y_true, y_pred)?,
            rmse: rmse(y_true, y_pred)?,
            mae: mae(y_true, y_pred)?,
        })
    }
}

/// Scores of one evaluation, written as flat `key=value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub n_samples: usize,
    pub classification: Option<ClassificationReport>,
    pub regression: Option<RegressionReport>,
}

impl EvalReport {
    pub fn classification(task: &str, y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Self> {
        Ok(EvalReport {
            task: task.into(),
            n_samples: y_true.len(),
            classification: Some(ClassificationReport::compute(y_true, y_pred, n_classes)?),
            regression: None,
        })
    }

    pub fn regression(task: &str, y_true: &[f64], y_pred: &[f64]) -> Result<Self> {
        Ok(EvalReport {
            task: task.into(),
            n_samples: y_true.len(),
            classification: None,
            regression: Some(RegressionReport::compute(y_true, y_pred)?),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task={}", self.task);
        let _ = writeln!(s, "n_samples={}", self.n_samples);
        if let Some(c) = &self.classification {
            let _ = writeln!(s, "accuracy={:?}", c.accuracy);
            let _ = writeln!(s, "macro_f1={:?}", c.macro_f1);
            let _ = writeln!(s, "weighted_f1={:?}", c.weighted_f1);
            for (i, k) in c.per_class.iter().enumerate() {
                let _ = writeln!(s, "class.{i}.precision={:?}", k.precision);
                let _ = writeln!(s, "class.{i}.recall={:?}", k.recall);
                let _ = writeln!(s, "class.{i}.f1={:?}", k.f1);
                let _ = writeln!(s, "class.{i}.support={}", k.support);
            }
            for (i, row) in c.confusion.iter().enumerate() {
                let row: Vec<String> = row.iter().map(u64::to_string).collect();
                let _ = writeln!(s, "confusion.{i}={}", row.join(","));
            }
        }
        if let Some(r) = &self.regression {
            let _ = writeln!(s, "pearson={:?}", r.pearson);
            let _ = writeln!(s, "r2={:?}", r.r2);
            let _ = writeln!(s, "rmse={:?}", r.rmse);
            let _ = writeln!(s, "mae={:?}", r.mae);
        }
        s
    }
}
