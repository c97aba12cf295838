//! Low-bit quantized classifier training with knowledge distillation.
//!
//! The crate is organized around six pieces:
//!
//! - [`tensor`]: a dense tensor type plus a reverse-mode autodiff tape
//!   sufficient to train small MLP/CNN classifiers in `f32` or `f64`.
//! - [`quantizer`]: symmetric 1-bit and b-bit weight quantizers, step-size
//!   selection (std-dev scaled or L2-optimal), and the shadow-weight /
//!   straight-through-estimator contract used during retraining.
//! - [`distill`]: temperature-scaled softmax distillation loss, the
//!   gradual-soft-loss-reducing lambda schedule, and soft-label analytics.
//! - [`models`]: a width-scalable MLP / small-convnet family with
//!   deterministic initialization and a checksummed checkpoint format.
//! - [`data`]: IDX and CIFAR-10 binary loaders, a synthetic Gaussian-cluster
//!   generator, and deterministic batch iteration.
//! - [`harness`]: training loops (hard-label and distillation fine-tuning),
//!   a grid sweep runner with an append-only results store, and CSV / SVG /
//!   markdown report emission.

pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod float;
pub mod harness;
pub mod models;
pub mod quantizer;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use float::Float;
pub use tensor::{Tape, Tensor, Var};
