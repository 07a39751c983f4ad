//! Dense rank-2 kernels, reverse-mode differentiation and the optimizer.

mod matrix;
mod optim;
mod params;
mod tape;

pub use matrix::{
    cross_entropy, layer_norm_rows, matmul, matmul_transposed, relu, softmax, softmax_rows,
    transposed_matmul, Matrix, Scalar,
};
pub use optim::{AdamConfig, OptimizerState};
pub use params::{GradValue, Gradients, Parameter, ParameterSet};
pub use tape::{Tape, Var};

/// Layer-norm variance floor used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

mod gradcheck;
pub use gradcheck::{max_relative_error, GradientCheck};
