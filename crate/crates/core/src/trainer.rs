//! Mini-batch training, evaluation and prediction export.
//!
//! Training runs in `f32`. Each batch is padded to its longest sequence and
//! every sample gets its own graph; per-sample forwards and backwards run in
//! parallel and their gradients are summed in batch order, so results do not
//! depend on the number of threads.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::encoders::{
    select_streams, Checkpoint, CheckpointMeta, ForwardCtx, Hyperparams, InputDims, Model,
    ModelInput, StreamInput,
};
use crate::error::{Error, Result};
use crate::featstore::{
    filter_trainable, Dataset, DatasetManifest, FeatureSequence, MultimodalSample, Split,
    NUM_EMOTIONS,
};
use crate::objectives::{mean_pcc, LossKind, MetricReport};
use crate::util::mix64;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const CLIP_NORM: f64 = 1.0;
/// Memory allowed for the per-sample graphs of one batch step.
const GRAPH_BYTES: usize = 256 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_pcc: f64,
    pub val_mse: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    /// Mean training loss per epoch.
    pub fn loss_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|i| &self.epochs[i])
    }

    /// One JSON object per epoch.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e).expect("epoch record serializes");
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Per-sample predictions in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTable {
    pub sample_ids: Vec<String>,
    pub rows: Vec<[f64; NUM_EMOTIONS]>,
}

impl PredictionTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// N×7 matrix of the predictions.
    pub fn to_tensor(&self) -> Result<Tensor<f64>> {
        Tensor::matrix(
            self.rows.len(),
            NUM_EMOTIONS,
            self.rows.iter().flatten().copied().collect(),
        )
    }

    /// `sample_id,e0..e6` with six decimals.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        let cols: Vec<String> = (0..NUM_EMOTIONS).map(|i| format!("e{i}")).collect();
        writeln!(out, "sample_id,{}", cols.join(",")).unwrap();
        for (id, row) in self.sample_ids.iter().zip(&self.rows) {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "{id},{}", vals.join(",")).unwrap();
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Labels of `split` as an N×7 matrix, in dataset order. Every sample in the
/// split must be labeled.
pub fn split_targets(ds: &Dataset, split: Split) -> Result<(Vec<String>, Tensor<f64>)> {
    let samples = ds.split(split);
    let mut ids = Vec::with_capacity(samples.len());
    let mut data = Vec::with_capacity(samples.len() * NUM_EMOTIONS);
    for s in samples {
        let l = s.label.ok_or_else(|| {
            Error::Precondition(format!(
                "{} sample `{}` has no label",
                split.as_str(),
                s.sample_id
            ))
        })?;
        ids.push(s.sample_id.clone());
        data.extend_from_slice(l.values());
    }
    if ids.len() < 2 {
        return Err(Error::Precondition(format!(
            "{} split has {} labeled samples; at least 2 are needed",
            split.as_str(),
            ids.len()
        )));
    }
    Ok((ids, Tensor::matrix(data.len() / NUM_EMOTIONS, NUM_EMOTIONS, data)?))
}

/// Scores a prediction table against the labels of `split`.
pub fn score_predictions(table: &PredictionTable, ds: &Dataset, split: Split) -> Result<MetricReport> {
    let (ids, target) = split_targets(ds, split)?;
    if ids != table.sample_ids {
        return Err(Error::Precondition(format!(
            "prediction table does not cover the {} split in order",
            split.as_str()
        )));
    }
    mean_pcc(&table.to_tensor()?, &target)
}

fn check_dims(model: &Model<f32>, ds: &Dataset) -> Result<()> {
    let want = InputDims::resolve(model.hp(), &ds.dims)?;
    if &want != model.dims() {
        return Err(Error::Shape(format!(
            "checkpoint expects input dims {:?}, dataset provides {:?}",
            model.dims(),
            want
        )));
    }
    Ok(())
}

fn predict_samples(model: &Model<f32>, samples: &[&MultimodalSample]) -> Result<PredictionTable> {
    let rows = samples
        .par_iter()
        .map(|s| {
            let y = model.predict(&ModelInput::from_sample(model.hp(), s)?)?;
            let mut row = [0.0; NUM_EMOTIONS];
            for (r, &v) in row.iter_mut().zip(y.data()) {
                *r = v as f64;
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionTable {
        sample_ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
        rows,
    })
}

/// Predictions for every sample of `split`, in dataset order. Dropout off.
pub fn predict(model: &Model<f32>, ds: &Dataset, split: Split) -> Result<PredictionTable> {
    check_dims(model, ds)?;
    predict_samples(model, &ds.split(split))
}

/// Metrics on a labeled split. Dropout off.
pub fn evaluate(model: &Model<f32>, ds: &Dataset, split: Split) -> Result<MetricReport> {
    split_targets(ds, split)?;
    score_predictions(&predict(model, ds, split)?, ds, split)
}

struct Prepared {
    primary: FeatureSequence,
    secondary: Option<FeatureSequence>,
    target: [f32; NUM_EMOTIONS],
}

struct Adam {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(model: &Model<f32>) -> Self {
        let zeros: BTreeMap<String, Vec<f32>> = model
            .params()
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model<f32>, grads: &BTreeMap<String, Vec<f32>>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        let step = (lr / bc1) as f32;
        let bc2 = bc2 as f32;
        for (name, p) in model.params_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step * *mi / ((*vi / bc2).sqrt() + ADAM_EPS as f32);
            }
        }
    }
}

/// Result of a finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

/// A training run that can be advanced one epoch at a time.
pub struct TrainSession {
    hp: Hyperparams,
    seed: u64,
    model: Model<f32>,
    adam: Adam,
    train: Vec<Prepared>,
    val: Dataset,
    step: u64,
    history: TrainHistory,
    best: Option<(usize, f64, Model<f32>)>,
    stale: usize,
    started: Instant,
    graph_bytes: usize,
}

impl TrainSession {
    /// Validates `hp`, drops train samples without a detected face and
    /// initializes the model from `seed`.
    pub fn new(ds: &Dataset, hp: &Hyperparams, seed: u64) -> Result<Self> {
        hp.validate()?;
        let ds = ds.filter_trainable();
        let mut hp = hp.clone();
        hp.seed = seed;
        let train_samples = ds.split(Split::Train);
        if train_samples.is_empty() {
            return Err(Error::Precondition("train split is empty".into()));
        }
        let val_samples: Vec<MultimodalSample> = ds.split(Split::Val).into_iter().cloned().collect();
        let val = Dataset {
            samples: val_samples,
            dims: ds.dims.clone(),
        };
        split_targets(&val, Split::Val)?;
        let mut train = Vec::with_capacity(train_samples.len());
        for s in train_samples {
            let (primary, secondary) = select_streams(&hp, s)?;
            let label = s.label.ok_or_else(|| {
                Error::Precondition(format!("train sample `{}` has no label", s.sample_id))
            })?;
            let mut target = [0.0f32; NUM_EMOTIONS];
            for (t, &v) in target.iter_mut().zip(label.values()) {
                *t = v as f32;
            }
            train.push(Prepared {
                primary,
                secondary,
                target,
            });
        }
        let dims = InputDims::resolve(&hp, &ds.dims)?;
        let model = Model::init(&hp, &dims, seed)?;
        Ok(TrainSession {
            adam: Adam::new(&model),
            hp,
            seed,
            model,
            train,
            val,
            step: 0,
            history: TrainHistory::default(),
            best: None,
            stale: 0,
            started: Instant::now(),
            graph_bytes: GRAPH_BYTES,
        })
    }

    pub fn hp(&self) -> &Hyperparams {
        &self.hp
    }

    /// Caps the memory used by per-sample graphs in one batch step
    /// (default 256 MiB). Results do not depend on it.
    pub fn set_graph_budget(&mut self, bytes: usize) {
        self.graph_bytes = bytes;
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn epochs_done(&self) -> usize {
        self.history.epochs.len()
    }

    /// True once `max_epochs` ran or patience is exhausted.
    pub fn is_done(&self) -> bool {
        self.epochs_done() >= self.hp.max_epochs
            || (self.hp.patience > 0 && self.stale >= self.hp.patience)
    }

    /// Current (latest-epoch) parameters.
    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(&[self.seed, 0xBA7C, epoch as u64]));
        order.shuffle(&mut rng);
        let mut out: Vec<Vec<usize>> = order.chunks(self.hp.batch_size).map(<[usize]>::to_vec).collect();
        if self.hp.loss_kind == LossKind::Pcc && out.last().is_some_and(|b| b.len() < 2) {
            out.pop();
        }
        out
    }

    fn train_batch(&mut self, batch: &[usize]) -> Result<f64> {
        let max_len = batch.iter().map(|&i| self.train[i].primary.frames()).max().unwrap_or(0);
        let max_sec = batch
            .iter()
            .filter_map(|&i| self.train[i].secondary.as_ref().map(FeatureSequence::frames))
            .max();
        let ctx = ForwardCtx {
            train: true,
            seed: mix64(&[self.seed, 0xD409]),
            step: self.step,
            slot: 0,
        };
        let model = &self.model;
        let train = &self.train;
        let forward = |slot: usize, trainable: bool| -> Result<(Graph<f32>, Vec<Var>, Var)> {
            let p = &train[batch[slot]];
            let input = ModelInput {
                primary: StreamInput::from_sequence(&p.primary, max_len)?,
                secondary: match (&p.secondary, max_sec) {
                    (Some(s), Some(n)) => Some(StreamInput::from_sequence(s, n)?),
                    _ => None,
                },
            };
            let mut g = Graph::new();
            let bound = model.bind(&mut g, trainable)?;
            let c = ForwardCtx {
                slot: slot as u64,
                ..ctx
            };
            let out = model.forward(&mut g, &bound, &input, &c)?;
            let vars = bound.iter().map(|(_, v)| v).collect();
            Ok((g, vars, out))
        };

        // Each per-sample graph holds a copy of the parameters and, after
        // backward, a full gradient. Large models get bounded chunks and a
        // second forward pass; the arithmetic is identical either way.
        let per_sample_bytes = 2 * model.num_params() * std::mem::size_of::<f32>();
        let chunk = (self.graph_bytes / per_sample_bytes.max(1)).clamp(1, batch.len());
        let slots: Vec<usize> = (0..batch.len()).collect();
        let mut kept = Vec::new();
        let mut outputs = Vec::with_capacity(batch.len());
        if chunk == batch.len() {
            kept = slots
                .par_iter()
                .map(|&s| forward(s, true))
                .collect::<Result<Vec<_>>>()?;
            outputs.extend(kept.iter().map(|(g, _, o)| g.value(*o).clone()));
        } else {
            for part in slots.chunks(chunk) {
                let outs = part
                    .par_iter()
                    .map(|&s| forward(s, false).map(|(g, _, o)| g.value(o).clone()))
                    .collect::<Result<Vec<_>>>()?;
                outputs.extend(outs);
            }
        }

        // batch loss on the stacked outputs
        let mut lg = Graph::new();
        let outs = outputs
            .into_iter()
            .map(|t| lg.param(t))
            .collect::<Result<Vec<_>>>()?;
        let pred = lg.concat_rows(&outs)?;
        let target = Tensor::matrix(
            batch.len(),
            NUM_EMOTIONS,
            batch.iter().flat_map(|&i| self.train[i].target).collect(),
        )?;
        let loss = self.hp.loss_kind.build(&mut lg, pred, &target)?;
        let loss_value = lg.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {}",
                self.step
            )));
        }
        let lgrads = lg.backward(loss)?;

        // backpropagate each sample with its slice of dL/dpred
        let backward = |(mut g, vars, o): (Graph<f32>, Vec<Var>, Var), slot: usize| -> Result<Vec<Tensor<f32>>> {
            let seed_grad = lgrads.get(outs[slot]).expect("output gradient").clone();
            let root = g.dot_const(o, &seed_grad)?;
            let mut gr = g.backward(root)?;
            Ok(vars.iter().map(|&v| gr.take(v).expect("param gradient")).collect())
        };
        let mut total: Option<Vec<Vec<f32>>> = None;
        let mut accumulate = |grads: Vec<Vec<Tensor<f32>>>| {
            for sample in grads {
                match &mut total {
                    None => total = Some(sample.iter().map(|t| t.data().to_vec()).collect()),
                    Some(acc) => {
                        for (a, t) in acc.iter_mut().zip(&sample) {
                            for (x, &v) in a.iter_mut().zip(t.data()) {
                                *x += v;
                            }
                        }
                    }
                }
            }
        };
        if kept.is_empty() {
            for part in slots.chunks(chunk) {
                let grads = part
                    .par_iter()
                    .map(|&s| backward(forward(s, true)?, s))
                    .collect::<Result<Vec<_>>>()?;
                accumulate(grads);
            }
        } else {
            let grads = kept
                .into_par_iter()
                .enumerate()
                .map(|(s, f)| backward(f, s))
                .collect::<Result<Vec<_>>>()?;
            accumulate(grads);
        }
        let mut total = total.expect("non-empty batch");
        let names: Vec<String> = self.model.params().keys().cloned().collect();

        let norm: f64 = total
            .iter()
            .flatten()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient at step {}", self.step)));
        }
        if norm > CLIP_NORM {
            let s = (CLIP_NORM / norm) as f32;
            total.iter_mut().flatten().for_each(|v| *v *= s);
        }
        let grads: BTreeMap<String, Vec<f32>> = names.into_iter().zip(total).collect();
        self.adam.step(&mut self.model, &grads, self.hp.learning_rate);
        self.step += 1;
        Ok(loss_value)
    }

    /// Runs one epoch plus validation and updates the best-epoch record.
    pub fn step_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epochs_done();
        let batches = self.batches(epoch);
        if batches.is_empty() {
            return Err(Error::Precondition(
                "no batch of at least 2 samples can be formed for PCC loss".into(),
            ));
        }
        let mut loss_sum = 0.0;
        for b in &batches {
            loss_sum += self.train_batch(b)?;
        }
        let report = evaluate(&self.model, &self.val, Split::Val)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            val_mean_pcc: report.mean_pcc,
            val_mse: report.mse,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let improved = self.best.as_ref().is_none_or(|(_, s, _)| rec.val_mean_pcc > *s);
        if improved {
            self.best = Some((epoch, rec.val_mean_pcc, self.model.clone()));
            self.history.best_epoch = Some(epoch);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.history.epochs.push(rec.clone());
        Ok(rec)
    }

    /// Best validation score seen so far.
    pub fn best_score(&self) -> Option<f64> {
        self.best.as_ref().map(|(_, s, _)| *s)
    }

    /// Returns the parameters of the best-validation epoch.
    pub fn finish(self) -> Result<TrainOutcome> {
        let (best_epoch, score, model) = self
            .best
            .ok_or_else(|| Error::Precondition("no epoch was trained".into()))?;
        let meta = CheckpointMeta {
            epochs_trained: self.history.epochs.len(),
            best_epoch: Some(best_epoch),
            best_val_mean_pcc: Some(score),
        };
        Ok(TrainOutcome {
            checkpoint: Checkpoint { model, meta },
            history: self.history,
        })
    }
}

/// Trains until `max_epochs` or patience runs out.
pub fn train(ds: &Dataset, hp: &Hyperparams, seed: u64) -> Result<TrainOutcome> {
    let mut s = TrainSession::new(ds, hp, seed)?;
    while !s.is_done() {
        s.step_epoch()?;
    }
    s.finish()
}

/// [`train`] on a manifest; loads every referenced feature file first.
pub fn train_manifest(manifest: &DatasetManifest, hp: &Hyperparams, seed: u64) -> Result<TrainOutcome> {
    hp.validate()?;
    let ds = Dataset::load(&filter_trainable(manifest))?;
    train(&ds, hp, seed)
}
