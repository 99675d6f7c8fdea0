//! Regression losses, the mean-PCC challenge metric and label correlations.
//!
//! PCC uses a zero-variance guard: when either series has population
//! variance below [`VARIANCE_FLOOR`] the correlation is reported as 0.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{CustomBackward, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub per_emotion_pcc: Vec<f64>,
    pub mean_pcc: f64,
    pub n_samples: usize,
}

fn check_pair<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean squared error over every entry.
pub fn mse<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    check_pair(pred, target)?;
    let n = S::from_usize(pred.numel()).unwrap();
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<S>()
        / n)
}

/// Centered sums `(sxy, sxx, syy)` and the guarded correlation.
fn pcc_parts<S: Scalar>(x: impl Iterator<Item = S> + Clone, y: impl Iterator<Item = S> + Clone, n: usize) -> (S, S, S, S) {
    let nn = S::from_usize(n).unwrap();
    let mx = x.clone().sum::<S>() / nn;
    let my = y.clone().sum::<S>() / nn;
    let (mut sxy, mut sxx, mut syy) = (S::zero(), S::zero(), S::zero());
    for (a, b) in x.zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let floor = S::lit(VARIANCE_FLOOR);
    let r = if sxx / nn < floor || syy / nn < floor {
        S::zero()
    } else {
        (sxy / (sxx * syy).sqrt()).max(-S::one()).min(S::one())
    };
    (r, sxy, sxx, syy)
}

/// Sample Pearson correlation, in `[-1, 1]`.
pub fn pcc<S: Scalar>(x: &[S], y: &[S]) -> Result<S> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("pcc of lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Precondition(format!(
            "pcc needs at least 2 samples, got {}",
            x.len()
        )));
    }
    Ok(pcc_parts(x.iter().copied(), y.iter().copied(), x.len()).0)
}

fn column<S: Scalar>(t: &Tensor<S>, j: usize) -> impl Iterator<Item = S> + Clone + '_ {
    let c = t.cols();
    t.data().iter().skip(j).step_by(c).copied()
}

/// Per-emotion PCC across samples, averaged over emotions, plus MSE.
pub fn mean_pcc<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<MetricReport> {
    check_pair(pred, target)?;
    let n = pred.rows();
    if n < 2 {
        return Err(Error::Precondition(format!("mean_pcc needs at least 2 samples, got {n}")));
    }
    let per: Vec<f64> = (0..pred.cols())
        .map(|j| pcc_parts(column(pred, j), column(target, j), n).0.to_f64_lossy())
        .collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok(MetricReport {
        mse: mse(pred, target)?.to_f64_lossy(),
        per_emotion_pcc: per,
        mean_pcc: mean,
        n_samples: n,
    })
}

/// `C[i][j] = pcc(column i, column j)` of an N×7 label matrix.
pub fn label_corr_matrix<S: Scalar>(labels: &Tensor<S>) -> Result<Vec<Vec<f64>>> {
    let n = labels.rows();
    if n < 2 {
        return Err(Error::Precondition(format!(
            "label correlation needs at least 2 samples, got {n}"
        )));
    }
    let c = labels.cols();
    let mut m = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in i..c {
            let r = pcc_parts(column(labels, i), column(labels, j), n).0.to_f64_lossy();
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    Ok(m)
}

/// Header row of emotion names, then one row of values per emotion.
pub fn write_corr_csv(matrix: &[Vec<f64>], names: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if names.len() != matrix.len() {
        return Err(Error::config(
            "emotion_names",
            format!("{} names for a {}×{} matrix", names.len(), matrix.len(), matrix.len()),
        ));
    }
    let mut out = Vec::new();
    writeln!(out, "{}", names.join(",")).unwrap();
    for row in matrix {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{}", cells.join(",")).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_report_json(report: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct MseBackward<S: Scalar> {
    target: Tensor<S>,
}

impl<S: Scalar> CustomBackward<S> for MseBackward<S> {
    fn backward(&self, inputs: &[&Tensor<S>], _out: &Tensor<S>, grad: &Tensor<S>) -> Vec<Tensor<S>> {
        let p = inputs[0];
        let k = grad.data()[0] * S::lit(2.0) / S::from_usize(p.numel()).unwrap();
        let d = p
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(&a, &b)| k * (a - b))
            .collect();
        vec![Tensor::new(p.shape().to_vec(), d).expect("same shape")]
    }
}

/// Differentiable MSE between a B×7 prediction node and constant targets.
pub fn mse_loss<S: Scalar>(g: &mut Graph<S>, pred: Var, target: &Tensor<S>) -> Result<Var> {
    let value = mse(g.value(pred), target)?;
    g.custom(
        &[pred],
        Tensor::scalar(value),
        Box::new(MseBackward {
            target: target.clone(),
        }),
    )
}

struct PccBackward<S: Scalar> {
    target: Tensor<S>,
}

impl<S: Scalar> CustomBackward<S> for PccBackward<S> {
    fn backward(&self, inputs: &[&Tensor<S>], _out: &Tensor<S>, grad: &Tensor<S>) -> Vec<Tensor<S>> {
        let p = inputs[0];
        let (n, c) = (p.rows(), p.cols());
        let nn = S::from_usize(n).unwrap();
        let scale = -grad.data()[0] / S::from_usize(c).unwrap();
        let mut d = vec![S::zero(); p.numel()];
        for j in 0..c {
            let (r, _, sxx, syy) = pcc_parts(column(p, j), column(&self.target, j), n);
            if sxx / nn < S::lit(VARIANCE_FLOOR) || syy / nn < S::lit(VARIANCE_FLOOR) {
                continue;
            }
            let mx = column(p, j).sum::<S>() / nn;
            let my = column(&self.target, j).sum::<S>() / nn;
            let denom = (sxx * syy).sqrt();
            for i in 0..n {
                let xc = p.get2(i, j) - mx;
                let yc = self.target.get2(i, j) - my;
                d[i * c + j] = scale * (yc / denom - r * xc / sxx);
            }
        }
        vec![Tensor::new(p.shape().to_vec(), d).expect("same shape")]
    }
}

/// Mean over columns of the within-batch PCC (guarded).
pub fn batch_mean_pcc<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    check_pair(pred, target)?;
    let n = pred.rows();
    if n < 2 {
        return Err(Error::Precondition(format!("PCC loss needs a batch of at least 2, got {n}")));
    }
    let c = pred.cols();
    let total: S = (0..c)
        .map(|j| pcc_parts(column(pred, j), column(target, j), n).0)
        .sum();
    Ok(total / S::from_usize(c).unwrap())
}

/// `1 - batch_mean_pcc`, differentiable in the predictions. Range `[0, 2]`.
pub fn pcc_loss<S: Scalar>(g: &mut Graph<S>, pred: Var, target: &Tensor<S>) -> Result<Var> {
    let value = S::one() - batch_mean_pcc(g.value(pred), target)?;
    g.custom(
        &[pred],
        Tensor::scalar(value),
        Box::new(PccBackward {
            target: target.clone(),
        }),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Pcc,
}

impl LossKind {
    pub fn build<S: Scalar>(self, g: &mut Graph<S>, pred: Var, target: &Tensor<S>) -> Result<Var> {
        match self {
            LossKind::Mse => mse_loss(g, pred, target),
            LossKind::Pcc => pcc_loss(g, pred, target),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "pcc" => Ok(LossKind::Pcc),
            other => Err(Error::config("loss", format!("unknown loss `{other}`"))),
        }
    }
}
