//! Emotional reaction intensity estimation from precomputed per-frame
//! feature streams: feature I/O, a small autodiff engine, sequence encoders,
//! correlation objectives, training, search and ensembling.

pub mod diffcore;
pub mod encoders;
pub mod ensembler;
pub mod error;
pub mod featstore;
pub mod objectives;
pub mod scalar;
pub mod trainer;
pub mod tuner;
pub mod util;

pub use diffcore::{Graph, Tensor, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use encoders::{Hyperparams, Model};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
/// Precision used for training, checkpoints and prediction.
pub type Model32 = Model<f32>;
/// Double-precision model, used for gradient checking.
pub type Model64 = Model<f64>;
