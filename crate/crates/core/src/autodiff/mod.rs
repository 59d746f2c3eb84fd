//! Dense tensors and tape-based reverse-mode differentiation.

pub mod check;
mod loss;
mod param;
mod sparse;
mod tape;
mod tensor;

pub use loss::{bce, bce_mean, bce_value, PROB_EPS};
pub use param::{checksum, sgd_step, Parameter};
pub use sparse::SparseRows;
pub use tape::{fault, Op, Tape, Var};
pub use tensor::{max_rel_error, Tensor};
