//! Reverse-mode differentiable tensor operations for the sequence models.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{CustomBackward, DropoutKey, Gradients, Graph, Var};
pub use tensor::Tensor;

use crate::scalar::Scalar;

/// Standard sinusoidal position table, `frames × dim`.
pub fn sinusoidal_encoding<S: Scalar>(frames: usize, dim: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(frames * dim);
    for pos in 0..frames {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            data.push(S::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_parts(vec![frames, dim], data)
}
