//! Explicit alignment of embeddings across modality compositions.
//!
//! The recipe has four independent parts, each in its own module:
//!
//! * [`calibration`]: a learned temperature per modality, mixed per instance;
//! * [`negatives`]: a rising hard-negative mask with a debiased contrastive loss;
//! * [`geometry`]: batch whitening plus a covariance-alignment penalty, and the
//!   diagnostics used to inspect the gap between query and target sets;
//! * [`trainer`]: the total objective, Adam, and finite-difference checks.
//!
//! [`synth`] supplies a seeded toy world and encoder to train on, and
//! [`evalkit`] scores retrieval on it.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod io;
pub mod negatives;
pub mod numerics;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
