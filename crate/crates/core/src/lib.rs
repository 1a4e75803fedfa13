//! Attention pyramids ("split, attend, merge, stack") for metric-learning
//! retrieval, on top of a small f64 reverse-mode tensor engine.
//!
//! Module map:
//! - [`tensor`]: dense tensors, the computation tape, tensor file format.
//! - [`attention`]: squeeze-excite channel attention and relation-aware
//!   spatial attention.
//! - [`pyramid`]: multi-level split/attend/merge/stack gating.
//! - [`losses`]: batch-hard triplet, label-smoothed cross-entropy, total loss.
//! - [`model`]: toy backbone, synthetic identity data, PK sampling, FLOP
//!   counting, optimizer and training loop.
//! - [`eval`]: distance matrices, CMC and mAP.
//! - [`gradcheck`]: central finite-difference certification of gradients.

pub mod attention;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod pyramid;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
