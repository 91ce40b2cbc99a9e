//! Product-unit residual networks on a from-scratch autodiff core.
//!
//! The crate provides:
//!
//! - a dense [`Tensor`] type and reverse-mode [`tape::Tape`] covering the
//!   operations needed by convolutional classifiers;
//! - the 2D product-unit convolution ([`pu`]): clamp by a trainable
//!   threshold, log, convolve, exponentiate — plus a direct-product oracle;
//! - residual [`arch`]itectures built from standard or product-unit blocks,
//!   with exact parameter accounting and bit-exact checkpoints;
//! - SGD training with the multistep / plateau schedules ([`optim`],
//!   [`train`]);
//! - dataset ingestion, augmentation, and Poisson-noise robustness
//!   measurement ([`data`]);
//! - a gradient-check and parameter-audit harness ([`verify`]).
//!
//! Core math is generic over the scalar type: `f32` for training, `f64` for
//! gradient checks and oracles.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod init;
pub mod linalg;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod pu;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod util;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;

/// Single-precision tensor used for training.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor used by gradient checks and oracles.
pub type Tensor64 = Tensor<f64>;
/// Single-precision network.
pub type Network32 = arch::Network<f32>;
/// Double-precision network.
pub type Network64 = arch::Network<f64>;
