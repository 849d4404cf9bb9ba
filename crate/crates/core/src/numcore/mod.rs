//! Dense matrices, reverse-mode differentiation, and Adam.

mod gradcheck;
pub mod kernels;
mod matrix;
mod optim;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use kernels::{
    concat_vertical, layer_norm, matmul, sigmoid, softmax_cols, LAYER_NORM_EPS,
};
pub use matrix::Matrix;
pub use optim::{adam_step, AdamConfig, OptimState};
pub use tape::{bce_sum, Gradients, NodeId, Tape, BCE_EPS};
