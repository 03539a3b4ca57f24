//! Dense arrays, a reverse-mode tape, and the Adam update rule.

mod adam;
mod array;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod param;

pub use adam::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
pub use array::{Array, DType, Real};
pub use checkpoint::{Checkpoint, Payload, Record};
pub use graph::{CustomOp, Gradients, Graph, Var};
#[allow(unused_imports)]
pub(crate) use graph::{sigmoid, softplus};
pub use param::{Param, ParamGroup};
