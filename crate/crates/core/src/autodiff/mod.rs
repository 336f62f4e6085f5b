//! Dense tensor engine with reverse-mode differentiation.

pub mod gradcheck;
mod linalg;
mod tape;

pub use tape::{Conv2dSpec, Tape, Var, NORM_EPS};
