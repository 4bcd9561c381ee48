//! The guide's chapters, compiled so that `cargo test` runs every snippet.
//!
//! mdbook cannot resolve crate dependencies when testing, so each chapter is
//! pulled in as the doc comment of an empty module instead.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/calibration.md")]
pub mod calibration {}
#[doc = include_str!("../../../book/src/negatives.md")]
pub mod negatives {}
#[doc = include_str!("../../../book/src/geometry.md")]
pub mod geometry {}
#[doc = include_str!("../../../book/src/synthetic-world.md")]
pub mod synthetic_world {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/reference-run.md")]
pub mod reference_run {}
