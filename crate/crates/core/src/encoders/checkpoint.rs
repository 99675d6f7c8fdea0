//! Little-endian checkpoint file:
//!
//! ```text
//! "ERIC" | version u32 | header_len u32 | header JSON
//! | n_tensors u32 | n × (name_len u32, name, ndim u32, dims u32 × ndim)
//! | f32 data of every tensor, in table order
//! ```
//!
//! The header holds hyperparameters, input widths and training metadata.
//! Nothing time-dependent is written, so equal models give equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Hyperparams, InputDims, Model};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ERIC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epochs_trained: usize,
    pub best_epoch: Option<usize>,
    pub best_val_mean_pcc: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    hyperparams: Hyperparams,
    input_dims: InputDims,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Validation(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub(crate) fn encode(model: &Model<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if let Some((name, _)) = model.params().iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Numerical(format!("parameter `{name}` is not finite")));
    }
    let header = serde_json::to_vec(&Header {
        hyperparams: model.hp().clone(),
        input_dims: model.dims().clone(),
        meta: meta.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(&header);
    put_u32(&mut out, model.params().len())?;
    for (name, t) in model.params() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
    }
    for t in model.params().values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &Model<f32>, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = |msg: String| Error::Format {
        path: path.into(),
        msg,
    };
    let corrupt = |msg: String| Error::Corruption {
        path: path.into(),
        msg,
    };
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4).map_err(format)? != CHECKPOINT_MAGIC {
        return Err(format("missing ERIC magic".into()));
    }
    let version = r.u32().map_err(format)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = r.u32().map_err(format)?;
    let header: Header = serde_json::from_slice(r.take(hlen).map_err(format)?)
        .map_err(|e| format(format!("bad header: {e}")))?;

    let n = r.u32().map_err(&corrupt)?;
    let mut table = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = r.u32().map_err(&corrupt)?;
        let name = std::str::from_utf8(r.take(len).map_err(&corrupt)?)
            .map_err(|_| corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32().map_err(&corrupt)?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>();
        table.push((name, shape.map_err(&corrupt)?));
    }
    let mut params = BTreeMap::new();
    for (name, shape) in table {
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4).map_err(&corrupt)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(corrupt(format!("tensor `{name}` holds non-finite values")));
        }
        let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(corrupt(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let model = Model::from_params(header.hyperparams, header.input_dims, params)
        .map_err(|e| corrupt(e.to_string()))?;
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}
