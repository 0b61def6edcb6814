//! A deliberately small reverse-mode differentiation kernel.
//!
//! The op vocabulary is fixed to what a compact causal transformer needs:
//! dense products, bias/residual adds, layer normalization, softmax, GELU,
//! embedding lookup, fused causal attention, row gather/concat, dropout and a
//! masked cross-entropy loss. Every op records itself on a [`Tape`]; a call
//! to [`Tape::backward`] walks the tape in reverse and accumulates gradients.
//!
//! All kernels are generic over [`Scalar`] so the same code runs in `f32` for
//! training and `f64` for finite-difference checks.

mod error;
pub mod gradcheck;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::NnError;
pub use optim::{AdamConfig, OptimizerState};
pub use params::{Checkpoint, Param, ParamStore, CHECKPOINT_FORMAT_VERSION};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, NnError>;
