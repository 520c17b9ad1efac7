//! Dense matrix arithmetic and reverse-mode differentiation.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{Gradients, Tape, TapeId, EPS_CLIP};
