//! Dense double-precision tensors, a recorded tape with reverse-mode
//! gradients, Adam, and the binary checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod linalg;
mod optim;
mod param;
mod tensor;

pub use graph::{
    conv_out_len, log_sum_exp, softmax_in_place, ConvGeom, Gradients, Graph, Var, LAYER_NORM_EPS,
};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// Relative error used by the gradient checks: `|a - b| / max(1, |b|)`.
pub fn grad_check_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}
