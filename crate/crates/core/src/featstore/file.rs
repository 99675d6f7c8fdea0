//! Little-endian feature file:
//! `"ERIF" | version u32 | dim u32 | frames u32 | f64 × frames | f32 × frames·dim`.

use std::fs;
use std::path::Path;

use super::FeatureSequence;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"ERIF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let modality = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.rsplit('.').next())
        .unwrap_or_default()
        .to_string();
    decode(&bytes, &modality).map_err(|e| match e {
        DecodeError::Format(msg) => Error::Format {
            path: path.into(),
            msg,
        },
        DecodeError::Corruption(msg) => Error::Corruption {
            path: path.into(),
            msg,
        },
        DecodeError::Invalid(e) => e,
    })
}

pub fn write_feature_file(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if seq.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "refusing to write non-finite features to {}",
            path.display()
        )));
    }
    fs::write(path, encode(seq)).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode(seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + seq.frames() * 8 + seq.data().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.frames() as u32).to_le_bytes());
    for t in seq.timestamps() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    for v in seq.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

enum DecodeError {
    Format(String),
    Corruption(String),
    Invalid(Error),
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn decode(bytes: &[u8], modality: &str) -> Result<FeatureSequence, DecodeError> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != FEATURE_MAGIC {
        return Err(DecodeError::Format("missing ERIF magic".into()));
    }
    let version = u32_at(bytes, 4);
    if version != FEATURE_VERSION {
        return Err(DecodeError::Format(format!("unsupported version {version}")));
    }
    let dim = u32_at(bytes, 8) as usize;
    let frames = u32_at(bytes, 12) as usize;
    let expected = HEADER_LEN + frames * 8 + frames * dim * 4;
    if bytes.len() != expected {
        return Err(DecodeError::Corruption(format!(
            "header declares {frames} frames of dim {dim} ({expected} bytes), file has {}",
            bytes.len()
        )));
    }
    let ts_end = HEADER_LEN + frames * 8;
    let timestamps = bytes[HEADER_LEN..ts_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = bytes[ts_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureSequence::new(modality, dim, timestamps, data).map_err(DecodeError::Invalid)
}
