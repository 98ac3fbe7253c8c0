//! Dense arrays and a one-shot reverse-mode tape.
//!
//! The operation set is deliberately small: it is exactly what the
//! conditioning network, the prompt encoder and the losses are built from.
//! Every operation checks that its output is finite.

mod array;
mod gradcheck;
mod params;
mod tape;

pub use array::DenseArray;
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use params::{Bound, ParamEntry, ParamSet};
pub use tape::{
    Activation, ElementwiseOp, Gradients, Operand, RowFilter, Tape, Var, SAFE_DIV_EPS,
};


#[cfg(test)]
mod tests;
