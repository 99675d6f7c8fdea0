//! Sequence encoders mapping feature streams to seven emotion intensities.
//!
//! Three architectures share one parameter store:
//!
//! * `te`: conv front-end, optional sinusoidal positions, pre-norm
//!   transformer blocks, masked mean pool, two-layer head, sigmoid.
//! * `resnet1d`: conv stem and seven residual blocks of
//!   conv → LN → ReLU → conv → LN with identity skips.
//! * cross-attention: one transformer stack per modality where each
//!   stream's queries attend to the other stream's previous-layer states.
//!
//! Padded frames are zeroed before every convolution, hidden as attention
//! keys and skipped by pooling, so padding never changes the outputs for the
//! valid frames.

mod checkpoint;
mod hparams;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use hparams::{Backbone, FusionMode, Hyperparams};

use crate::diffcore::{sinusoidal_encoding, DropoutKey, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::featstore::{concat_streams, FeatureSequence, MultimodalSample, NUM_EMOTIONS};
use crate::scalar::Scalar;
use crate::util::mix64;

/// Residual blocks in the `resnet1d` backbone.
pub const RESNET_BLOCKS: usize = 7;

const LN_EPS: f64 = 1e-5;
const HEAD_SITE: u64 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Te,
    Resnet1d,
    CrossAttention,
}

impl Architecture {
    pub fn of(hp: &Hyperparams) -> Self {
        match (hp.fusion_mode, hp.backbone) {
            (FusionMode::CrossAttention, _) => Architecture::CrossAttention,
            (_, Backbone::Te) => Architecture::Te,
            (_, Backbone::Resnet1d) => Architecture::Resnet1d,
        }
    }
}

/// Feature widths the model consumes. `secondary` is the audio width for
/// cross-attention models and `None` otherwise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub primary: usize,
    pub secondary: Option<usize>,
}

impl InputDims {
    /// Derives the input widths from per-modality dims of a dataset.
    pub fn resolve(hp: &Hyperparams, dims: &BTreeMap<String, usize>) -> Result<Self> {
        let width = |ids: &[String]| -> Result<usize> {
            ids.iter()
                .map(|m| {
                    dims.get(m).copied().ok_or_else(|| {
                        Error::Manifest(format!("stream `{m}` is not present in the dataset"))
                    })
                })
                .sum()
        };
        Ok(match hp.fusion_mode {
            FusionMode::VisualOnly => InputDims {
                primary: width(&hp.visual_streams)?,
                secondary: None,
            },
            FusionMode::AudioOnly => InputDims {
                primary: width(&hp.audio_streams)?,
                secondary: None,
            },
            FusionMode::Concat => InputDims {
                primary: width(&hp.visual_streams)? + width(&hp.audio_streams)?,
                secondary: None,
            },
            FusionMode::CrossAttention => InputDims {
                primary: width(&hp.visual_streams)?,
                secondary: Some(width(&hp.audio_streams)?),
            },
        })
    }
}

/// Picks and merges the streams a fusion mode needs from one sample.
/// Returns the primary sequence and, for cross-attention, the audio one.
pub fn select_streams(
    hp: &Hyperparams,
    sample: &MultimodalSample,
) -> Result<(FeatureSequence, Option<FeatureSequence>)> {
    let gather = |ids: &[String]| -> Result<Vec<&FeatureSequence>> {
        ids.iter()
            .map(|m| {
                sample.streams.get(m).ok_or_else(|| {
                    Error::Manifest(format!("sample `{}` has no `{m}` stream", sample.sample_id))
                })
            })
            .collect()
    };
    let merge = |seqs: Vec<&FeatureSequence>| -> Result<FeatureSequence> {
        if seqs.len() == 1 {
            Ok(seqs[0].clone())
        } else {
            concat_streams(&seqs, hp.align)
        }
    };
    Ok(match hp.fusion_mode {
        FusionMode::VisualOnly => (merge(gather(&hp.visual_streams)?)?, None),
        FusionMode::AudioOnly => (merge(gather(&hp.audio_streams)?)?, None),
        FusionMode::Concat => {
            let mut all = gather(&hp.visual_streams)?;
            all.extend(gather(&hp.audio_streams)?);
            (concat_streams(&all, hp.align)?, None)
        }
        FusionMode::CrossAttention => (
            merge(gather(&hp.visual_streams)?)?,
            Some(merge(gather(&hp.audio_streams)?)?),
        ),
    })
}

/// One stream as a (possibly padded) frame matrix plus its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamInput<S> {
    pub frames: Tensor<S>,
    pub valid: Vec<bool>,
}

impl<S: Scalar> StreamInput<S> {
    pub fn new(frames: Tensor<S>, valid: Vec<bool>) -> Result<Self> {
        if frames.shape().len() != 2 || frames.rows() != valid.len() {
            return Err(Error::Shape(format!(
                "mask of length {} for frames {:?}",
                valid.len(),
                frames.shape()
            )));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::Precondition("stream has no valid frames".into()));
        }
        Ok(StreamInput { frames, valid })
    }

    /// Copies `seq` into a `pad_to × dim` matrix; rows past the sequence are
    /// zero and flagged invalid.
    pub fn from_sequence(seq: &FeatureSequence, pad_to: usize) -> Result<Self> {
        let (t, d) = (seq.frames(), seq.dim());
        if t == 0 {
            return Err(Error::Precondition(format!(
                "stream `{}` has no frames",
                seq.modality_id()
            )));
        }
        if pad_to < t {
            return Err(Error::Shape(format!("cannot pad {t} frames to {pad_to}")));
        }
        let mut data = vec![S::zero(); pad_to * d];
        for (o, &v) in data.iter_mut().zip(seq.data()) {
            *o = S::from_f32_lossy(v);
        }
        let valid = (0..pad_to).map(|i| i < t).collect();
        StreamInput::new(Tensor::matrix(pad_to, d, data)?, valid)
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<S> {
    pub primary: StreamInput<S>,
    pub secondary: Option<StreamInput<S>>,
}

impl<S: Scalar> ModelInput<S> {
    /// Unpadded input for a single sample.
    pub fn from_sample(hp: &Hyperparams, sample: &MultimodalSample) -> Result<Self> {
        let (p, s) = select_streams(hp, sample)?;
        Ok(ModelInput {
            primary: StreamInput::from_sequence(&p, p.frames())?,
            secondary: s
                .map(|s| StreamInput::from_sequence(&s, s.frames()))
                .transpose()?,
        })
    }
}

/// Dropout switch and the numbers that key its masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardCtx {
    pub train: bool,
    pub seed: u64,
    pub step: u64,
    /// Position of the sample in its batch.
    pub slot: u64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            seed: 0,
            step: 0,
            slot: 0,
        }
    }

    fn dropout<S: Scalar>(&self, g: &mut Graph<S>, x: Var, p: f64, site: u64) -> Result<Var> {
        let key = DropoutKey {
            seed: self.seed,
            instance: mix64(&[self.slot, site]),
            step: self.step,
        };
        g.dropout(x, p, key, self.train)
    }
}

/// Parameter name → graph variable.
#[derive(Clone, Debug, Default)]
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    pub fn new(names: impl IntoIterator<Item = String>, vars: impl IntoIterator<Item = Var>) -> Self {
        Bound(names.into_iter().zip(vars).collect())
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.0.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

struct Layout(Vec<ParamSpec>);

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn dense(&mut self, prefix: &str, w: &str, b: &str, fan_in: usize, fan_out: usize) {
        let a = 1.0 / (fan_in as f64).sqrt();
        self.push(format!("{prefix}.{w}"), vec![fan_in, fan_out], Init::Uniform(a));
        self.push(format!("{prefix}.{b}"), vec![fan_out], Init::Zeros);
    }

    fn conv(&mut self, prefix: &str, k: usize, d: usize, c: usize) {
        let a = 1.0 / ((k * d) as f64).sqrt();
        self.push(format!("{prefix}.w"), vec![k, d, c], Init::Uniform(a));
        self.push(format!("{prefix}.b"), vec![c], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.g"), vec![d], Init::Ones);
        self.push(format!("{prefix}.b"), vec![d], Init::Zeros);
    }

    fn block(&mut self, prefix: &str, h: usize, cross: bool) {
        self.norm(&format!("{prefix}.ln1"), h);
        if cross {
            self.norm(&format!("{prefix}.lnkv"), h);
        }
        let attn = format!("{prefix}.attn");
        for p in ["q", "k", "v", "o"] {
            self.dense(&attn, &format!("w{p}"), &format!("b{p}"), h, h);
        }
        self.norm(&format!("{prefix}.ln2"), h);
        let ff = format!("{prefix}.ff");
        self.dense(&ff, "w1", "b1", h, 2 * h);
        self.dense(&ff, "w2", "b2", 2 * h, h);
    }

    fn head(&mut self, in_dim: usize, h: usize) {
        self.dense("head.fc1", "w", "b", in_dim, h);
        self.dense("head.fc2", "w", "b", h, NUM_EMOTIONS);
    }

    fn of(hp: &Hyperparams, dims: &InputDims) -> Result<Self> {
        let (h, k) = (hp.hidden_dim, hp.conv_kernel);
        let mut l = Layout(Vec::new());
        match Architecture::of(hp) {
            Architecture::Te => {
                l.conv("front.conv", k, dims.primary, h);
                for i in 0..hp.num_layers {
                    l.block(&format!("enc.{i}"), h, false);
                }
                l.norm("enc.norm", h);
                l.head(h, h);
            }
            Architecture::Resnet1d => {
                l.conv("stem.conv", k, dims.primary, h);
                l.norm("stem.ln", h);
                for i in 0..RESNET_BLOCKS {
                    l.conv(&format!("res.{i}.conv1"), k, h, h);
                    l.norm(&format!("res.{i}.ln1"), h);
                    l.conv(&format!("res.{i}.conv2"), k, h, h);
                    l.norm(&format!("res.{i}.ln2"), h);
                }
                l.head(h, h);
            }
            Architecture::CrossAttention => {
                let da = dims.secondary.ok_or_else(|| {
                    Error::config("fusion_mode", "cross_attention needs an audio input width")
                })?;
                l.conv("front_v.conv", k, dims.primary, h);
                l.conv("front_a.conv", k, da, h);
                for i in 0..hp.num_layers {
                    l.block(&format!("enc_v.{i}"), h, true);
                    l.block(&format!("enc_a.{i}"), h, true);
                }
                l.norm("norm_v", h);
                l.norm("norm_a", h);
                l.head(2 * h, h);
            }
        }
        if dims.primary == 0 || dims.secondary == Some(0) {
            return Err(Error::config("input_dims", "feature width must be positive"));
        }
        Ok(l)
    }
}

/// Parameters plus the configuration that gives them meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Scalar> {
    hp: Hyperparams,
    dims: InputDims,
    params: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Model<S> {
    /// Seeded initialization: weights uniform in ±1/√fan_in, biases and
    /// norm shifts zero, norm gains one.
    pub fn init(hp: &Hyperparams, dims: &InputDims, seed: u64) -> Result<Self> {
        hp.validate()?;
        let layout = Layout::of(hp, dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(&[seed, 0x1217]));
        let mut params = BTreeMap::new();
        for spec in layout.0 {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Uniform(a) => (0..n).map(|_| S::lit(rng.random_range(-a..a))).collect(),
                Init::Zeros => vec![S::zero(); n],
                Init::Ones => vec![S::one(); n],
            };
            params.insert(spec.name, Tensor::new(spec.shape, data)?);
        }
        let mut hp = hp.clone();
        hp.seed = seed;
        Ok(Model {
            hp,
            dims: dims.clone(),
            params,
        })
    }

    /// Wraps existing tensors, checking names and shapes against the layout
    /// implied by `hp` and `dims`.
    pub fn from_params(
        hp: Hyperparams,
        dims: InputDims,
        params: BTreeMap<String, Tensor<S>>,
    ) -> Result<Self> {
        hp.validate()?;
        let layout = Layout::of(&hp, &dims)?;
        if layout.0.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                layout.0.len(),
                params.len()
            )));
        }
        for spec in &layout.0 {
            match params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => return Err(Error::Shape(format!("missing parameter `{}`", spec.name))),
            }
        }
        Ok(Model { hp, dims, params })
    }

    pub fn hp(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn dims(&self) -> &InputDims {
        &self.dims
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::of(&self.hp)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    /// Mutable access to parameter values; shapes cannot change through it.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            hp: self.hp.clone(),
            dims: self.dims.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Adds every parameter to `g` as a trainable leaf or a constant.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.params {
            let var = if trainable {
                g.param(v.clone())?
            } else {
                g.constant(v.clone())?
            };
            vars.insert(k.clone(), var);
        }
        Ok(Bound(vars))
    }

    /// 1×7 output in (0, 1).
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        input: &ModelInput<S>,
        ctx: &ForwardCtx,
    ) -> Result<Var> {
        fuse_forward(g, &self.hp, bound, input, ctx)
    }

    /// Evaluation-mode prediction for one input.
    pub fn predict(&self, input: &ModelInput<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let out = self.forward(&mut g, &bound, input, &ForwardCtx::eval())?;
        Ok(g.value(out).clone())
    }
}

fn front<S: Scalar>(
    g: &mut Graph<S>,
    hp: &Hyperparams,
    b: &Bound,
    prefix: &str,
    x: &StreamInput<S>,
) -> Result<Var> {
    let xin = g.constant(x.frames.clone())?;
    let xin = g.mask_rows(xin, &x.valid)?;
    let h = g.conv1d(
        xin,
        b.get(&format!("{prefix}.conv.w"))?,
        b.get(&format!("{prefix}.conv.b"))?,
    )?;
    if hp.positional_encoding {
        let pe = sinusoidal_encoding(x.len(), hp.hidden_dim);
        g.add_const(h, &pe)
    } else {
        Ok(h)
    }
}

fn norm<S: Scalar>(g: &mut Graph<S>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    g.layer_norm(
        x,
        b.get(&format!("{prefix}.g"))?,
        b.get(&format!("{prefix}.b"))?,
        S::lit(LN_EPS),
    )
}

fn dense<S: Scalar>(g: &mut Graph<S>, b: &Bound, w: &str, bias: &str, x: Var) -> Result<Var> {
    g.affine(x, b.get(w)?, b.get(bias)?)
}

/// Pre-norm block. With `kv`, keys and values come from the other stream.
#[allow(clippy::too_many_arguments)]
fn encoder_block<S: Scalar>(
    g: &mut Graph<S>,
    hp: &Hyperparams,
    b: &Bound,
    prefix: &str,
    h: Var,
    valid: &[bool],
    kv: Option<(Var, &[bool])>,
    ctx: &ForwardCtx,
    site: u64,
) -> Result<Var> {
    let p = |n: &str| format!("{prefix}.{n}");
    let a = norm(g, b, &p("ln1"), h)?;
    let (src, key_valid) = match kv {
        None => (a, valid),
        Some((other, ov)) => (norm(g, b, &p("lnkv"), other)?, ov),
    };
    let q = dense(g, b, &p("attn.wq"), &p("attn.bq"), a)?;
    let k = dense(g, b, &p("attn.wk"), &p("attn.bk"), src)?;
    let v = dense(g, b, &p("attn.wv"), &p("attn.bv"), src)?;
    let att = g.attention(q, k, v, hp.num_heads, key_valid)?;
    let o = dense(g, b, &p("attn.wo"), &p("attn.bo"), att)?;
    let o = ctx.dropout(g, o, hp.dropout, site)?;
    let h = g.add(h, o)?;

    let f = norm(g, b, &p("ln2"), h)?;
    let f = dense(g, b, &p("ff.w1"), &p("ff.b1"), f)?;
    let f = g.gelu(f)?;
    let f = ctx.dropout(g, f, hp.dropout, site + 1)?;
    let f = dense(g, b, &p("ff.w2"), &p("ff.b2"), f)?;
    let f = ctx.dropout(g, f, hp.dropout, site + 2)?;
    g.add(h, f)
}

fn head<S: Scalar>(
    g: &mut Graph<S>,
    hp: &Hyperparams,
    b: &Bound,
    pooled: Var,
    ctx: &ForwardCtx,
) -> Result<Var> {
    let z = dense(g, b, "head.fc1.w", "head.fc1.b", pooled)?;
    let z = g.relu(z)?;
    let z = ctx.dropout(g, z, hp.dropout, HEAD_SITE)?;
    let z = dense(g, b, "head.fc2.w", "head.fc2.b", z)?;
    g.sigmoid(z)
}

/// Transformer-encoder path on a single stream; returns 1×7.
pub fn te_forward<S: Scalar>(
    g: &mut Graph<S>,
    hp: &Hyperparams,
    b: &Bound,
    x: &StreamInput<S>,
    ctx: &ForwardCtx,
) -> Result<Var> {
    let mut h = front(g, hp, b, "front", x)?;
    for l in 0..hp.num_layers {
        h = encoder_block(g, hp, b, &format!("enc.{l}"), h, &x.valid, None, ctx, 16 * l as u64)?;
    }
    let h = norm(g, b, "enc.norm", h)?;
    let pooled = g.masked_mean_pool(h, &x.valid)?;
    head(g, hp, b, pooled, ctx)
}

/// Residual-network path on a single stream; returns 1×7.
pub fn resnet1d_forward<S: Scalar>(
    g: &mut Graph<S>,
    hp: &Hyperparams,
    b: &Bound,
    x: &StreamInput<S>,
    ctx: &ForwardCtx,
) -> Result<Var> {
    let xin = g.constant(x.frames.clone())?;
    let xin = g.mask_rows(xin, &x.valid)?;
    let h = g.conv1d(xin, b.get("stem.conv.w")?, b.get("stem.conv.b")?)?;
    let h = norm(g, b, "stem.ln", h)?;
    let mut h = g.relu(h)?;
    for i in 0..RESNET_BLOCKS {
        let p = |n: &str| format!("res.{i}.{n}");
        let y = g.mask_rows(h, &x.valid)?;
        let y = g.conv1d(y, b.get(&p("conv1.w"))?, b.get(&p("conv1.b"))?)?;
        let y = norm(g, b, &p("ln1"), y)?;
        let y = g.relu(y)?;
        let y = g.mask_rows(y, &x.valid)?;
        let y = g.conv1d(y, b.get(&p("conv2.w"))?, b.get(&p("conv2.b"))?)?;
        let y = norm(g, b, &p("ln2"), y)?;
        let s = g.add(h, y)?;
        h = g.relu(s)?;
    }
    let pooled = g.masked_mean_pool(h, &x.valid)?;
    head(g, hp, b, pooled, ctx)
}

fn cross_forward<S: Scalar>(
    g: &mut Graph<S>,
    hp: &Hyperparams,
    b: &Bound,
    v: &StreamInput<S>,
    a: &StreamInput<S>,
    ctx: &ForwardCtx,
) -> Result<Var> {
    let mut hv = front(g, hp, b, "front_v", v)?;
    let mut ha = front(g, hp, b, "front_a", a)?;
    for l in 0..hp.num_layers {
        let site = 16 * l as u64;
        let nv = encoder_block(
            g,
            hp,
            b,
            &format!("enc_v.{l}"),
            hv,
            &v.valid,
            Some((ha, &a.valid)),
            ctx,
            site,
        )?;
        let na = encoder_block(
            g,
            hp,
            b,
            &format!("enc_a.{l}"),
            ha,
            &a.valid,
            Some((hv, &v.valid)),
            ctx,
            site + 8,
        )?;
        hv = nv;
        ha = na;
    }
    let hv = norm(g, b, "norm_v", hv)?;
    let ha = norm(g, b, "norm_a", ha)?;
    let pv = g.masked_mean_pool(hv, &v.valid)?;
    let pa = g.masked_mean_pool(ha, &a.valid)?;
    let pooled = g.concat_cols(&[pv, pa])?;
    head(g, hp, b, pooled, ctx)
}

/// Dispatches on fusion mode and backbone. Single-input modes run the
/// backbone on the primary stream; cross-attention needs both streams.
pub fn fuse_forward<S: Scalar>(
    g: &mut Graph<S>,
    hp: &Hyperparams,
    b: &Bound,
    input: &ModelInput<S>,
    ctx: &ForwardCtx,
) -> Result<Var> {
    match Architecture::of(hp) {
        Architecture::Te => te_forward(g, hp, b, &input.primary, ctx),
        Architecture::Resnet1d => resnet1d_forward(g, hp, b, &input.primary, ctx),
        Architecture::CrossAttention => {
            let a = input.secondary.as_ref().ok_or_else(|| {
                Error::Precondition("cross-attention fusion needs an audio stream".into())
            })?;
            cross_forward(g, hp, b, &input.primary, a, ctx)
        }
    }
}
