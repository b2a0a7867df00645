//! Dense tensors, the parameter registry, a reverse-mode tape and the
//! finite-difference gradient oracle every layer is verified against.

mod gradcheck;
mod graph;
pub mod kernels;
pub mod math;
mod param;
mod rng;
pub(crate) mod tensor;

pub use gradcheck::{check_gradients, check_gradients_replayed, check_gradients_with, GradCheckReport, Selection};
pub use graph::{Gradients, Graph, ScalarFn, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tensor::{interpolate_bilinear, matmul, matmul_nt, softmax_cols, softmax_rows, transpose, Tensor};
