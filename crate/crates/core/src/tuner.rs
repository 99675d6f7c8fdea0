//! Seeded random search with a synchronous successive-halving scheduler.
//!
//! All trials advance to each rung (epochs 1, 3 and the per-trial maximum);
//! after every rung but the last, the lower-scoring half is pruned. A trial's
//! score is its best validation mean PCC so far. Each trial's seed is a hash
//! of the search seed and the trial id, and training is deterministic, so the
//! record table does not depend on scheduling or thread count.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::Hyperparams;
use crate::error::{Error, Result};
use crate::featstore::{filter_trainable, Dataset, DatasetManifest};
use crate::objectives::LossKind;
use crate::trainer::TrainSession;
use crate::util::mix64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub lr: (f64, f64),
    pub batch_size: (usize, usize),
    pub hidden_dim: (usize, usize),
    pub trials: usize,
    pub max_epochs_per_trial: usize,
    /// Fixed settings shared by every trial (loss, heads, layers, fusion...).
    pub base: Hyperparams,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lr: (1e-5, 2e-4),
            batch_size: (8, 32),
            hidden_dim: (512, 1024),
            trials: 100,
            max_epochs_per_trial: 10,
            base: Hyperparams::default(),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(f, m));
        let (lo, hi) = self.lr;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("space.lr", "need 0 < low <= high");
        }
        let (blo, bhi) = self.batch_size;
        if blo < 1 || blo > bhi {
            return bad("space.batch_size", "need 1 <= low <= high");
        }
        if self.base.loss_kind == LossKind::Pcc && blo < 2 {
            return bad("space.batch_size", "PCC loss needs batches of at least 2");
        }
        let (hlo, hhi) = self.hidden_dim;
        if hlo > hhi {
            return bad("space.hidden_dim", "need low <= high");
        }
        if self.hidden_range().is_none() {
            return bad("space.hidden_dim", "no multiple of num_heads inside the interval");
        }
        if self.trials < 1 {
            return bad("space.trials", "must be >= 1");
        }
        if self.max_epochs_per_trial < 1 {
            return bad("space.max_epochs_per_trial", "must be >= 1");
        }
        Ok(())
    }

    /// Smallest and largest multiple of `num_heads` inside the hidden interval.
    fn hidden_range(&self) -> Option<(usize, usize)> {
        let h = self.base.num_heads;
        if h == 0 {
            return None;
        }
        let (lo, hi) = self.hidden_dim;
        let first = lo.div_ceil(h).max(1) * h;
        let last = hi / h * h;
        (first <= last).then_some((first, last))
    }

    /// Rung epochs: 1 and 3 when below the maximum, then the maximum.
    pub fn rungs(&self) -> Vec<usize> {
        let max = self.max_epochs_per_trial;
        let mut r: Vec<usize> = [1, 3].into_iter().filter(|&e| e < max).collect();
        r.push(max);
        r
    }
}

/// Draws trial `trial_id`'s configuration. Pure function of its arguments.
pub fn sample_config(space: &SearchSpace, trial_id: usize, seed: u64) -> Result<Hyperparams> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(&[seed, 0x7E57, trial_id as u64]));
    let (lo, hi) = space.lr;
    let lr = lo + (hi - lo) * rng.random::<f64>();
    let batch = rng.random_range(space.batch_size.0..=space.batch_size.1);
    let raw = rng.random_range(space.hidden_dim.0..=space.hidden_dim.1);
    let heads = space.base.num_heads;
    let (first, last) = space.hidden_range().expect("validated");
    let hidden = ((raw + heads / 2) / heads * heads).clamp(first, last);
    Ok(Hyperparams {
        learning_rate: lr,
        batch_size: batch,
        hidden_dim: hidden,
        max_epochs: space.max_epochs_per_trial,
        seed: trial_seed(seed, trial_id),
        patience: 0,
        ..space.base.clone()
    })
}

pub fn trial_seed(seed: u64, trial_id: usize) -> u64 {
    mix64(&[seed, trial_id as u64])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Completed,
    Pruned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub hyperparams: Hyperparams,
    /// Validation mean PCC after each completed epoch.
    pub val_trace: Vec<f64>,
    pub status: TrialStatus,
    /// Best validation mean PCC reached; `None` if the trial crashed first.
    pub score: Option<f64>,
    pub epochs: usize,
    pub error: Option<String>,
}

/// Completed trial with the highest score; ties go to the lower id.
pub fn best_trial(records: &[TrialRecord]) -> Result<&TrialRecord> {
    records
        .iter()
        .filter(|r| r.status == TrialStatus::Completed)
        .filter_map(|r| r.score.map(|s| (s, r)))
        .fold(None::<(f64, &TrialRecord)>, |acc, (s, r)| match acc {
            Some((bs, br)) if bs > s || (bs == s && br.trial_id < r.trial_id) => Some((bs, br)),
            _ => Some((s, r)),
        })
        .map(|(_, r)| r)
        .ok_or_else(|| Error::Precondition("no trial completed".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchOptions {
    pub parallelism: usize,
    /// Live training sessions are kept between rungs while their estimated
    /// size fits this many bytes; otherwise survivors are replayed from
    /// scratch, which gives identical results.
    pub session_budget_bytes: usize,
}

impl SearchOptions {
    pub fn new(parallelism: usize) -> Self {
        SearchOptions {
            parallelism,
            session_budget_bytes: 1 << 30,
        }
    }
}

struct Trial {
    record: TrialRecord,
    session: Option<TrainSession>,
    active: bool,
}

impl Trial {
    fn fail(&mut self, e: &Error) {
        self.record.status = TrialStatus::Pruned;
        self.record.error = Some(e.to_string());
        self.session = None;
        self.active = false;
    }

    fn advance(&mut self, ds: &Dataset, target: usize) {
        let result = (|| -> Result<()> {
            let mut s = match self.session.take() {
                Some(s) => s,
                None => TrainSession::new(ds, &self.record.hyperparams, self.record.hyperparams.seed)?,
            };
            while s.epochs_done() < target {
                s.step_epoch()?;
            }
            self.record.val_trace = s.history().epochs.iter().map(|e| e.val_mean_pcc).collect();
            self.record.epochs = s.epochs_done();
            self.record.score = s.best_score();
            self.session = Some(s);
            Ok(())
        })();
        if let Err(e) = result {
            self.fail(&e);
        }
    }

    /// Rough bytes held by a live session: parameters, two optimizer
    /// moments and the best-epoch copy, all `f32`.
    fn footprint(&self, input_width: usize) -> usize {
        let hp = &self.record.hyperparams;
        let h = hp.hidden_dim;
        let stacks = 2 * hp.num_layers.max(1) * (8 * h * h + 16 * h);
        let params = stacks + h * (hp.conv_kernel * input_width + h + 16);
        16 * params
    }
}

/// Results of a search, sorted by trial id.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub records: Vec<TrialRecord>,
}

impl SearchOutcome {
    pub fn best(&self) -> Result<&TrialRecord> {
        best_trial(&self.records)
    }

    /// One [`TrialRecord`] per line.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("trial record serializes");
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Best trial id, score and configuration plus status counts.
    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let count = |st: TrialStatus, failed: bool| {
            self.records
                .iter()
                .filter(|r| r.status == st && r.error.is_some() == failed)
                .count()
        };
        let best = self.best().ok();
        let summary = serde_json::json!({
            "trials": self.records.len(),
            "completed": count(TrialStatus::Completed, false),
            "pruned": count(TrialStatus::Pruned, false),
            "failed": count(TrialStatus::Pruned, true),
            "best_trial_id": best.map(|b| b.trial_id),
            "best_score": best.and_then(|b| b.score),
            "best_hyperparams": best.map(|b| &b.hyperparams),
        });
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Runs `space.trials` trials on `ds` with successive halving.
pub fn run_search(ds: &Dataset, space: &SearchSpace, seed: u64, parallelism: usize) -> Result<SearchOutcome> {
    run_search_with(ds, space, seed, &SearchOptions::new(parallelism))
}

/// [`run_search`] on a manifest; loads the trainable subset first.
pub fn run_search_manifest(
    manifest: &DatasetManifest,
    space: &SearchSpace,
    seed: u64,
    parallelism: usize,
) -> Result<SearchOutcome> {
    space.validate()?;
    let ds = Dataset::load(&filter_trainable(manifest))?;
    run_search(&ds, space, seed, parallelism)
}

pub fn run_search_with(
    ds: &Dataset,
    space: &SearchSpace,
    seed: u64,
    opts: &SearchOptions,
) -> Result<SearchOutcome> {
    space.validate()?;
    if opts.parallelism < 1 {
        return Err(Error::config("parallelism", "must be >= 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism)
        .build()
        .map_err(|e| Error::config("parallelism", e.to_string()))?;
    let dims: usize = ds.dims.values().sum();

    let mut trials = (0..space.trials)
        .map(|id| {
            Ok(Trial {
                record: TrialRecord {
                    trial_id: id,
                    hyperparams: sample_config(space, id, seed)?,
                    val_trace: Vec::new(),
                    status: TrialStatus::Pruned,
                    score: None,
                    epochs: 0,
                    error: None,
                },
                session: None,
                active: true,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let rungs = space.rungs();
    for (ri, &target) in rungs.iter().enumerate() {
        let live: usize = trials.iter().filter(|t| t.active).map(|t| t.footprint(dims)).sum();
        let keep_sessions = live <= opts.session_budget_bytes;
        pool.install(|| {
            trials.par_iter_mut().filter(|t| t.active).for_each(|t| {
                t.advance(ds, target);
                if !keep_sessions {
                    t.session = None;
                }
            })
        });
        if ri + 1 == rungs.len() {
            for t in trials.iter_mut().filter(|t| t.active) {
                t.record.status = TrialStatus::Completed;
                t.session = None;
            }
            break;
        }
        let mut ranked: Vec<(f64, usize)> = trials
            .iter()
            .filter(|t| t.active)
            .map(|t| (t.record.score.unwrap_or(f64::NEG_INFINITY), t.record.trial_id))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let keep = ranked.len().div_ceil(2);
        for &(_, id) in &ranked[keep..] {
            let t = &mut trials[id];
            t.active = false;
            t.session = None;
        }
    }
    Ok(SearchOutcome {
        records: trials.into_iter().map(|t| t.record).collect(),
    })
}
