//! Dense tensors with a recording tape for reverse-mode differentiation.

mod array;
pub mod gradcheck;
mod tape;

pub use array::Tensor;
pub use gradcheck::{grad_check, GradCheckReport, InputReport};
pub use tape::{BinaryKind, Tape, UnaryKind, Var};
