//! Weighted averaging of member predictions and cumulative ensemble reports.
//!
//! Members are combined in prediction space and the result is clamped to
//! `[0, 1]`. For each output element the weighted member terms are sorted
//! and then summed pairwise, which makes the full ensemble bit-for-bit
//! independent of member order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::load_checkpoint;
use crate::error::{Error, Result};
use crate::featstore::{Dataset, Split, NUM_EMOTIONS};
use crate::objectives::mean_pcc;
use crate::trainer::{predict, split_targets, PredictionTable};

const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    /// Member checkpoints, in reporting order.
    pub members: Vec<PathBuf>,
    /// One positive weight per member summing to 1; uniform when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

impl EnsembleSpec {
    pub fn uniform(members: Vec<PathBuf>) -> Self {
        EnsembleSpec {
            members,
            weights: None,
        }
    }

    /// Effective weights after validation.
    pub fn weights(&self) -> Result<Vec<f64>> {
        let m = self.members.len();
        if m == 0 {
            return Err(Error::config("members", "an ensemble needs at least one member"));
        }
        match &self.weights {
            None => Ok(vec![1.0 / m as f64; m]),
            Some(w) => {
                check_weights(w, m)?;
                Ok(w.clone())
            }
        }
    }

    /// Display id of member `i`: its file stem.
    pub fn member_id(&self, i: usize) -> String {
        self.members[i]
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("member_{i}"))
    }
}

fn check_weights(w: &[f64], members: usize) -> Result<()> {
    if w.len() != members {
        return Err(Error::config(
            "weights",
            format!("{} weights for {members} members", w.len()),
        ));
    }
    if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::config("weights", "every weight must be positive"));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::config("weights", format!("weights sum to {s}, not 1")));
    }
    Ok(())
}

fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Weighted mean of aligned prediction tables, clamped to `[0, 1]`.
pub fn combine(tables: &[PredictionTable], weights: &[f64]) -> Result<PredictionTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::config("members", "an ensemble needs at least one member"))?;
    check_weights(weights, tables.len())?;
    if first.is_empty() {
        return Err(Error::Precondition("nothing to ensemble: split is empty".into()));
    }
    for (i, t) in tables.iter().enumerate() {
        if t.sample_ids != first.sample_ids {
            return Err(Error::Precondition(format!(
                "member {i} predicts a different set of samples"
            )));
        }
    }
    let mut terms = vec![0.0; tables.len()];
    let rows = (0..first.len())
        .map(|r| {
            let mut row = [0.0; NUM_EMOTIONS];
            for (j, out) in row.iter_mut().enumerate() {
                for ((term, t), &w) in terms.iter_mut().zip(tables).zip(weights) {
                    *term = w * t.rows[r][j];
                }
                terms.sort_by(f64::total_cmp);
                *out = pairwise_sum(&terms).clamp(0.0, 1.0);
            }
            row
        })
        .collect();
    Ok(PredictionTable {
        sample_ids: first.sample_ids.clone(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub k: usize,
    /// Member added at this row.
    pub member_id: String,
    pub mean_pcc: f64,
}

/// Row `k` scores the ensemble of the first `k` tables against `target`
/// (N×7). Each prefix uses its weights renormalized to sum to one.
pub fn incremental_scores(
    tables: &[PredictionTable],
    weights: &[f64],
    member_ids: &[String],
    target: &crate::Tensor<f64>,
) -> Result<Vec<ReportRow>> {
    check_weights(weights, tables.len())?;
    if member_ids.len() != tables.len() {
        return Err(Error::config("members", "one id per member is required"));
    }
    (1..=tables.len())
        .map(|k| {
            let total: f64 = weights[..k].iter().sum();
            let mut w: Vec<f64> = weights[..k].iter().map(|x| x / total).collect();
            // absorb rounding so the prefix passes the sum check
            let drift = 1.0 - w.iter().sum::<f64>();
            w[k - 1] += drift;
            let ens = combine(&tables[..k], &w)?;
            Ok(ReportRow {
                k,
                member_id: member_ids[k - 1].clone(),
                mean_pcc: mean_pcc(&ens.to_tensor()?, target)?.mean_pcc,
            })
        })
        .collect()
}

fn member_predictions(spec: &EnsembleSpec, ds: &Dataset, split: Split) -> Result<Vec<PredictionTable>> {
    spec.weights()?;
    spec.members
        .par_iter()
        .map(|p| {
            let ck = load_checkpoint(p)?;
            predict(&ck.model, ds, split).map_err(|e| match e {
                Error::Shape(msg) => Error::Shape(format!("{}: {msg}", p.display())),
                other => other,
            })
        })
        .collect()
}

/// Ensemble predictions for every sample of `split`.
pub fn ensemble_predict(spec: &EnsembleSpec, ds: &Dataset, split: Split) -> Result<PredictionTable> {
    let tables = member_predictions(spec, ds, split)?;
    combine(&tables, &spec.weights()?)
}

/// Mean PCC of the first-`k` ensemble for `k = 1..=members`.
pub fn incremental_report(spec: &EnsembleSpec, ds: &Dataset, split: Split) -> Result<Vec<ReportRow>> {
    let (_, target) = split_targets(ds, split)?;
    let tables = member_predictions(spec, ds, split)?;
    let ids: Vec<String> = (0..spec.members.len()).map(|i| spec.member_id(i)).collect();
    incremental_scores(&tables, &spec.weights()?, &ids, &target)
}

/// CSV with columns `k,member_id,mean_pcc`.
pub fn write_report_csv(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "k,member_id,mean_pcc").unwrap();
    for r in rows {
        writeln!(out, "{},{},{:.6}", r.k, r.member_id, r.mean_pcc).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
