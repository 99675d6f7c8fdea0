//! Feature streams, labels, manifests and the synthetic dataset generator.

mod align;
mod file;
mod manifest;
mod synth;

pub use align::{concat_streams, nearest_indices, AlignPolicy};
pub use file::{read_feature_file, write_feature_file, FEATURE_MAGIC, FEATURE_VERSION};
pub use manifest::{
    filter_trainable, write_labels_csv, Dataset, DatasetManifest, ManifestEntry, MultimodalSample,
};
pub use synth::{gen_synthetic, generate, StreamSpec, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of emotional-reaction intensities per sample.
pub const NUM_EMOTIONS: usize = 7;

/// Default display names `emotion_0 .. emotion_6`.
pub fn default_emotion_names() -> Vec<String> {
    (0..NUM_EMOTIONS).map(|i| format!("emotion_{i}")).collect()
}

/// Seven intensities, each finite and within `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmotionVector([f64; NUM_EMOTIONS]);

impl EmotionVector {
    pub fn new(values: [f64; NUM_EMOTIONS]) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Validation(format!(
                "emotion intensity {i} = {v} outside [0, 1]"
            )));
        }
        Ok(EmotionVector(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; NUM_EMOTIONS] = values.try_into().map_err(|_| {
            Error::Validation(format!(
                "expected {NUM_EMOTIONS} intensities, got {}",
                values.len()
            ))
        })?;
        Self::new(arr)
    }

    pub fn values(&self) -> &[f64; NUM_EMOTIONS] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for EmotionVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        EmotionVector::from_slice(&v)
    }
}

impl From<EmotionVector> for Vec<f64> {
    fn from(e: EmotionVector) -> Self {
        e.0.to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

/// One modality's per-frame embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    modality_id: String,
    dim: usize,
    timestamps: Vec<f64>,
    data: Vec<f32>,
}

impl FeatureSequence {
    /// Validates dimensions, monotone timestamps and finiteness.
    pub fn new(
        modality_id: impl Into<String>,
        dim: usize,
        timestamps: Vec<f64>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let modality_id = modality_id.into();
        if dim == 0 {
            return Err(Error::Validation(format!("stream `{modality_id}` has dim 0")));
        }
        if data.len() != timestamps.len() * dim {
            return Err(Error::Validation(format!(
                "stream `{modality_id}`: {} values for {} frames of dim {dim}",
                data.len(),
                timestamps.len()
            )));
        }
        if timestamps.iter().any(|t| !t.is_finite()) || timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!(
                "stream `{modality_id}`: timestamps must be finite and strictly increasing"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "stream `{modality_id}` contains non-finite values"
            )));
        }
        Ok(FeatureSequence {
            modality_id,
            dim,
            timestamps,
            data,
        })
    }

    pub fn modality_id(&self) -> &str {
        &self.modality_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn with_modality_id(mut self, id: impl Into<String>) -> Self {
        self.modality_id = id.into();
        self
    }
}
