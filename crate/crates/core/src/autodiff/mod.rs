//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Covers exactly the op closure the simulator needs: elementwise arithmetic
//! and transcendentals, matmul and conv2d, reductions, shape surgery, and an
//! escape hatch ([`tape::CustomOp`]) for operations with hand-derived
//! backward passes. No GPU kernels, no graph optimization, no higher-order
//! derivatives.

mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled};
pub use scalar::Scalar;
pub use tape::{matmul_raw, AutodiffError, CustomOp, Gradients, Result, Tape};
pub use tensor::Tensor;
