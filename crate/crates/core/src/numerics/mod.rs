//! Dense tensors, a recording graph with reverse-mode gradients, and the
//! finite-difference harness every other module's gradient tests go through.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, NodeRecord, Var, LAYERNORM_EPS, NORMALIZE_EPS};
pub use params::{Bound, ParamId, Params};
pub use tensor::{Fnv, Tensor};

pub(crate) use graph::softmax_into;
