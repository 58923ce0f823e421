//! Dense `f64` tensors, flattened parameter vectors and reverse-mode
//! differentiation for a small causal transformer.

pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use graph::{value_and_grad, Graph, NodeId};
pub use kernels::log_softmax;
pub use params::{perturb, Layout, LayoutEntry, ParamVector};
pub use tensor::Tensor;

/// Relative error used by gradient checks: `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_difference(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
