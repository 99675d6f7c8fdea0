//! Deterministic stand-in dataset.
//!
//! Each sample draws a latent vector `z`; every stream's frames are a fixed
//! linear image of `z` plus per-frame noise. Labels are
//! `sigmoid(gain · B · mean_t(first stream) + c)`, a smooth function of the
//! pooled first-stream features, so a sequence model can learn them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::file::write_feature_file;
use super::manifest::{Dataset, DatasetManifest, ManifestEntry, MultimodalSample};
use super::{EmotionVector, FeatureSequence, Split, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::util::mix64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub id: String,
    pub dim: usize,
    /// Seconds between consecutive frames.
    pub hop_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// First stream drives the labels.
    pub streams: Vec<StreamSpec>,
    /// Frame-count range of the first stream, inclusive.
    pub min_frames: usize,
    pub max_frames: usize,
    /// Fraction of train/val samples flagged `face_detected = false`.
    pub no_face_fraction: f64,
    pub latent_dim: usize,
    pub frame_noise: f64,
    pub label_gain: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_train: 200,
            n_val: 50,
            n_test: 0,
            streams: vec![
                StreamSpec {
                    id: "visual".into(),
                    dim: 16,
                    hop_seconds: 0.2,
                },
                StreamSpec {
                    id: "audio".into(),
                    dim: 8,
                    hop_seconds: 0.32,
                },
            ],
            min_frames: 8,
            max_frames: 24,
            no_face_fraction: 0.1,
            latent_dim: 4,
            frame_noise: 0.5,
            label_gain: 1.5,
        }
    }
}

impl SynthSpec {
    /// Small spec for tests and search smoke runs.
    pub fn micro() -> Self {
        SynthSpec {
            n_train: 16,
            n_val: 8,
            min_frames: 4,
            max_frames: 8,
            ..SynthSpec::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_train + self.n_val + self.n_test == 0 {
            return Err(Error::config("synth", "zero samples requested"));
        }
        if self.streams.is_empty() {
            return Err(Error::config("synth.streams", "at least one stream required"));
        }
        for s in &self.streams {
            if s.dim == 0 || !(s.hop_seconds > 0.0) {
                return Err(Error::config(
                    "synth.streams",
                    format!("stream `{}` needs dim > 0 and hop > 0", s.id),
                ));
            }
        }
        if self.min_frames == 0 || self.max_frames < self.min_frames {
            return Err(Error::config("synth.min_frames", "need 1 <= min_frames <= max_frames"));
        }
        if !(0.0..=1.0).contains(&self.no_face_fraction) {
            return Err(Error::config("synth.no_face_fraction", "must be in [0, 1]"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("synth.latent_dim", "must be positive"));
        }
        Ok(())
    }
}

struct Generator {
    mixing: Vec<Vec<f64>>,
    label_map: Vec<f64>,
    label_bias: [f64; NUM_EMOTIONS],
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

impl Generator {
    fn new(spec: &SynthSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(&[seed, 0x5EED]));
        let l = spec.latent_dim;
        let mixing = spec
            .streams
            .iter()
            .map(|s| {
                let sc = 1.0 / (l as f64).sqrt();
                (0..s.dim * l).map(|_| normal(&mut rng) * sc).collect()
            })
            .collect();
        let d0 = spec.streams[0].dim;
        let sc = 1.0 / (d0 as f64).sqrt();
        let label_map = (0..NUM_EMOTIONS * d0).map(|_| normal(&mut rng) * sc).collect();
        let mut label_bias = [0.0; NUM_EMOTIONS];
        for b in &mut label_bias {
            *b = 0.3 * normal(&mut rng);
        }
        Generator {
            mixing,
            label_map,
            label_bias,
        }
    }

    fn sample(&self, spec: &SynthSpec, seed: u64, split: Split, idx: usize) -> Result<MultimodalSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(&[seed, split as u64, idx as u64]));
        let l = spec.latent_dim;
        let z: Vec<f64> = (0..l).map(|_| normal(&mut rng)).collect();
        let base_frames = rng.random_range(spec.min_frames..=spec.max_frames);
        let duration = base_frames as f64 * spec.streams[0].hop_seconds;

        let mut streams = BTreeMap::new();
        for (si, s) in spec.streams.iter().enumerate() {
            let frames = if si == 0 {
                base_frames
            } else {
                ((duration / s.hop_seconds).ceil() as usize).max(1)
            };
            let a = &self.mixing[si];
            let clean: Vec<f64> = (0..s.dim)
                .map(|d| (0..l).map(|k| a[d * l + k] * z[k]).sum())
                .collect();
            let mut data = Vec::with_capacity(frames * s.dim);
            for _ in 0..frames {
                for &c in &clean {
                    data.push((c + spec.frame_noise * normal(&mut rng)) as f32);
                }
            }
            let ts = (0..frames).map(|t| t as f64 * s.hop_seconds).collect();
            streams.insert(s.id.clone(), FeatureSequence::new(s.id.clone(), s.dim, ts, data)?);
        }

        let label = if split == Split::Test {
            None
        } else {
            let first = &streams[&spec.streams[0].id];
            let d0 = first.dim();
            let mut pooled = vec![0.0f64; d0];
            for t in 0..first.frames() {
                for (p, &v) in pooled.iter_mut().zip(first.row(t)) {
                    *p += v as f64;
                }
            }
            for p in &mut pooled {
                *p /= first.frames() as f64;
            }
            let mut vals = [0.0; NUM_EMOTIONS];
            for (e, v) in vals.iter_mut().enumerate() {
                let dot: f64 = (0..d0).map(|d| self.label_map[e * d0 + d] * pooled[d]).sum();
                let logit = spec.label_gain * dot + self.label_bias[e];
                *v = 1.0 / (1.0 + (-logit).exp());
            }
            Some(EmotionVector::new(vals)?)
        };
        let face_detected = split == Split::Test || rng.random::<f64>() >= spec.no_face_fraction;
        Ok(MultimodalSample {
            sample_id: format!("{}_{idx:04}", split.as_str()),
            streams,
            label,
            split,
            face_detected,
        })
    }
}

/// Generates the dataset in memory. Pure function of `(spec, seed)`.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let gen = Generator::new(spec, seed);
    let mut samples = Vec::with_capacity(spec.n_train + spec.n_val + spec.n_test);
    for (split, n) in [
        (Split::Train, spec.n_train),
        (Split::Val, spec.n_val),
        (Split::Test, spec.n_test),
    ] {
        for i in 0..n {
            samples.push(gen.sample(spec, seed, split, i)?);
        }
    }
    Dataset::from_samples(samples)
}

/// Generates the dataset and writes `manifest.jsonl` plus `features/*.erif`
/// under `out_dir`.
pub fn gen_synthetic(spec: &SynthSpec, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let ds = generate(spec, seed)?;
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut entries = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let mut streams = BTreeMap::new();
        for (m, seq) in &s.streams {
            let rel = Path::new("features").join(format!("{}.{m}.erif", s.sample_id));
            write_feature_file(seq, out_dir.join(&rel))?;
            streams.insert(m.clone(), rel);
        }
        entries.push(ManifestEntry {
            sample_id: s.sample_id.clone(),
            split: s.split,
            face_detected: s.face_detected,
            label: s.label,
            streams,
        });
    }
    let mut manifest = DatasetManifest::new(out_dir, entries)?;
    manifest.dims = ds.dims.clone();
    manifest.save(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
