//! Differentiable tensor operations.
//!
//! Each operation validates shapes, computes its forward value, and registers
//! a backward closure on the tape. [`OpKind`] enumerates every operation so
//! the verification registry can demand a gradient check for each one.

mod conv;
mod dense;
mod elementwise;
mod norm;
mod pool;

pub use conv::{conv2d, conv_output_hw};
pub use dense::{cross_entropy, linear};
pub use elementwise::{
    add, clamp_min, exp, exp_checked, log, max_scalar, mul, relu, softplus, sub, sum,
};
pub use norm::{batchnorm2d_eval, batchnorm2d_train, BatchStats, BN_EPS};
pub use pool::{global_avg_pool, maxpool2d};

/// Kind tag recorded on every tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    /// Input, constant, or parameter leaf.
    Leaf,
    Add,
    Sub,
    Mul,
    Sum,
    Log,
    Exp,
    Softplus,
    ClampMin,
    MaxScalar,
    Relu,
    Conv2d,
    BatchNorm2d,
    MaxPool2d,
    GlobalAvgPool,
    Linear,
    CrossEntropy,
}

impl OpKind {
    /// Every differentiable operation. The gradient-check registry matches on
    /// this list exhaustively, so extending it without adding a check case is
    /// a compile error there.
    pub const DIFFERENTIABLE: &'static [OpKind] = &[
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Sum,
        OpKind::Log,
        OpKind::Exp,
        OpKind::Softplus,
        OpKind::ClampMin,
        OpKind::MaxScalar,
        OpKind::Relu,
        OpKind::Conv2d,
        OpKind::BatchNorm2d,
        OpKind::MaxPool2d,
        OpKind::GlobalAvgPool,
        OpKind::Linear,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Softplus => "softplus",
            OpKind::ClampMin => "clamp_min",
            OpKind::MaxScalar => "max_scalar",
            OpKind::Relu => "relu",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm2d => "batchnorm2d",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Linear => "linear",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }
}
