//! Episodic few-shot classification with cross-adaptive attention.
//!
//! The crate trains and evaluates prototype-based few-shot classifiers on
//! N-way k-shot episodes. Support and query embeddings can be co-adapted
//! before classification by a shared attention block that attends across
//! the support/query boundary; several reduced variants (support-side only,
//! query-side only, plain self-attention, a parameter-free form, and no
//! adaptation at all) are selectable for ablation.
//!
//! Layering, bottom up:
//! - [`numerics`]: dense tensors and recorded-expression reverse-mode
//!   differentiation.
//! - [`episodes`]: datasets, synthetic generators, episode sampling, and the
//!   binary/CSV dataset container.
//! - [`encoder`]: the embedding networks (MLP and a small conv stack).
//! - [`attention`]: the adaptation blocks and their ablation modes.
//! - [`head`]: prototypes, distance softmax, episode loss and accuracy.
//! - [`trainer`]: Adam, the training loop, evaluation, checkpoints, and the
//!   ablation sweep.

pub mod attention;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod head;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Precision, Scalar, Tensor};
