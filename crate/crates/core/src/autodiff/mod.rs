//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheck, GradCheckReport, ParamCheck};
pub use graph::{Graph, Primitive, Var, LAYER_NORM_EPS};
pub use params::{Gradients, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::softmax_in_place;

#[cfg(test)]
mod tests;
