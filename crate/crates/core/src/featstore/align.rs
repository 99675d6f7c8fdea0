use serde::{Deserialize, Serialize};

use super::FeatureSequence;
use crate::error::{Error, Result};

/// How non-reference streams are mapped onto the reference timeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignPolicy {
    /// Each reference frame takes the other stream's closest frame in time
    /// (earlier frame on ties). Output has the reference frame count.
    #[default]
    Nearest,
    /// Keep the first `min(frames)` rows of every stream.
    TruncateToMin,
}

/// For each reference timestamp, the index of the closest `other` timestamp.
///
/// Both slices must be sorted ascending and `other` non-empty.
pub fn nearest_indices(reference: &[f64], other: &[f64]) -> Vec<usize> {
    let mut j = 0;
    reference
        .iter()
        .map(|&t| {
            while j + 1 < other.len() && (other[j + 1] - t).abs() < (other[j] - t).abs() {
                j += 1;
            }
            j
        })
        .collect()
}

/// Concatenates streams feature-wise on the first stream's timeline.
pub fn concat_streams(seqs: &[&FeatureSequence], policy: AlignPolicy) -> Result<FeatureSequence> {
    let Some(reference) = seqs.first() else {
        return Err(Error::Validation("concat_streams needs at least one stream".into()));
    };
    if let Some(empty) = seqs.iter().find(|s| s.is_empty()) {
        return Err(Error::Validation(format!(
            "cannot concatenate empty stream `{}`",
            empty.modality_id()
        )));
    }
    if seqs.len() == 1 {
        return Ok((*reference).clone());
    }
    let dim: usize = seqs.iter().map(|s| s.dim()).sum();
    let id = seqs.iter().map(|s| s.modality_id()).collect::<Vec<_>>().join("+");

    let (frames, maps): (usize, Vec<Vec<usize>>) = match policy {
        AlignPolicy::Nearest => {
            let n = reference.frames();
            let maps = seqs
                .iter()
                .map(|s| nearest_indices(reference.timestamps(), s.timestamps()))
                .collect();
            (n, maps)
        }
        AlignPolicy::TruncateToMin => {
            let n = seqs.iter().map(|s| s.frames()).min().unwrap();
            (n, seqs.iter().map(|_| (0..n).collect()).collect())
        }
    };

    let mut data = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        for (s, map) in seqs.iter().zip(&maps) {
            data.extend_from_slice(s.row(map[t]));
        }
    }
    let timestamps = reference.timestamps()[..frames].to_vec();
    FeatureSequence::new(id, dim, timestamps, data)
}
