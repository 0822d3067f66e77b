//! Minimal reverse-mode differentiation over dense `f64` arrays.

mod gradcheck;
mod tape;

pub use gradcheck::{check_gradient, check_gradient_many, RELATIVE_FLOOR};
pub use tape::{Gradients, Tape, Var, GUARD_EPS};
