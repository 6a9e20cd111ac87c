//! Dense matrices, a seeded generator and a reverse-mode tape.

mod matrix;
mod rng;
mod tape;

pub use matrix::Matrix;
pub use rng::{rand_normal, SeededRng};
pub use tape::{
    elementwise, laplacian_apply, rate, sigmoid, softmax, softplus, Fault, Gradients, OpKind, Tape, Unary, Var,
    LAYERNORM_EPS, RATE_CLAMP,
};
